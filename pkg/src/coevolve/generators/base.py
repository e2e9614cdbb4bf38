from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence


class GeneratorFailure(RuntimeError):
    """Generation failed (transport, server or decoding problem)."""


class CapabilityError(RuntimeError):
    """The generator does not support the requested operation."""


class UnknownContext(ValueError):
    """The context matches none of the prompt templates the generator understands."""


class UnreachableSequence(ValueError):
    """The given tokens cannot be produced from the context."""


@dataclass(frozen=True)
class Capabilities:
    trainable: bool
    stop_sequences: bool


@dataclass(frozen=True)
class Generation:
    tokens: tuple[str, ...]
    logprobs: Optional[tuple[float, ...]]
    finish_reason: str = "stop"  # "stop" | "length" | "eos"

    @property
    def text(self) -> str:
        return "".join(self.tokens)


class Generator:
    """A policy that continues a text context.

    ``generate`` must include a matched stop marker at the end of the returned
    text so the caller sees complete fences.
    """

    capabilities = Capabilities(trainable=False, stop_sequences=False)

    def generate(self, context: str, stop: Sequence[str], max_tokens: int, seed: int) -> Generation:
        raise NotImplementedError

    def logprob_of(self, context: str, tokens: Sequence[str]):
        raise CapabilityError(f"{type(self).__name__} cannot score sequences")

    def snapshot(self):
        raise CapabilityError(f"{type(self).__name__} has no trainable state")

    def restore(self, snap) -> None:
        raise CapabilityError(f"{type(self).__name__} has no trainable state")
