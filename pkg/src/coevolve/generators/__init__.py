from .base import (
    Capabilities,
    CapabilityError,
    Generation,
    Generator,
    GeneratorFailure,
    UnknownContext,
    UnreachableSequence,
)
from .toy import ToyConfig, ToyPolicy, ToyTaskGrammar, base_params, toy_generate, toy_logprob_grad
from .remote import RemoteConfig, RemoteGenerator, remote_generate

__all__ = [
    "Capabilities", "CapabilityError", "Generation", "Generator", "GeneratorFailure", "UnknownContext",
    "UnreachableSequence", "ToyConfig", "ToyPolicy", "ToyTaskGrammar", "base_params", "toy_generate",
    "toy_logprob_grad", "RemoteConfig", "RemoteGenerator", "remote_generate",
]
