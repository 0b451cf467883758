"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad input: malformed scenario, wrong vector length, invalid config."""


class IntegrationError(RuntimeError):
    """The ODE integration produced a non-finite state."""


class TrainingError(RuntimeError):
    """Flow training diverged (NaN loss) or could not proceed."""


class SamplingError(RuntimeError):
    """Posterior sampling could not produce enough in-support draws."""


class StateError(RuntimeError):
    """Operation called on an object in the wrong state (e.g. unfitted model)."""


class ProvenanceError(RuntimeError):
    """Provenance hashes do not match (wrong scenario/model pairing)."""
