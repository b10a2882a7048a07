"""Policy backends: analytic softmax, scripted stand-in, and remote sampling client."""

from metacog_rl.policy.base import Capabilities, PolicyBackend, TransportError, UnsupportedCapabilityError
from metacog_rl.policy.remote import RemoteBackend, RemoteBackendConfig
from metacog_rl.policy.scripted import ScriptedPolicy
from metacog_rl.policy.softmax import SoftmaxBackend, SoftmaxSequencePolicy

__all__ = [
    "Capabilities",
    "PolicyBackend",
    "RemoteBackend",
    "RemoteBackendConfig",
    "ScriptedPolicy",
    "SoftmaxBackend",
    "SoftmaxSequencePolicy",
    "TransportError",
    "UnsupportedCapabilityError",
]
