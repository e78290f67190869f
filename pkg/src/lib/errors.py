class SimError(Exception):
    """Base class for every error raised by the simulator."""


class ConfigError(SimError):
    def __init__(self, key, message=None):
        self.key = key
        super().__init__(f"{key}: {message}" if message else f"invalid config key '{key}'")


class MixedSkuInRack(ConfigError):
    def __init__(self, rack_id, counts):
        super().__init__(f"topology.{rack_id}", f"servers in one rack must share a GPU count, got {sorted(counts)}")


class EmptyTopology(ConfigError):
    def __init__(self, message="topology needs at least one rack with one server"):
        super().__init__("topology", message)


class DuplicateId(ConfigError):
    def __init__(self, key, item_id):
        self.item_id = item_id
        super().__init__(key, f"id '{item_id}' is used more than once")


class InvalidDistribution(ConfigError):
    pass


class IoError(SimError):
    def __init__(self, path, reason):
        self.path = path
        super().__init__(f"{path}: {reason}")


class SchemaError(SimError):
    def __init__(self, errors):
        # errors: list of (line_number, message)
        self.errors = list(errors)
        text = "; ".join(f"line {line}: {message}" for line, message in self.errors)
        super().__init__(text)


class NonMonotonicTimeWarning(UserWarning):
    pass


class SlotBusy(SimError):
    def __init__(self, slot, holder):
        self.slot = slot
        self.holder = holder
        super().__init__(f"slot {slot} is held by {holder}")


class PastEvent(SimError):
    pass


class LivelockGuard(SimError):
    pass


class UnknownVC(SimError):
    pass


class UnknownClass(SimError):
    pass


class EmptyCurve(SimError):
    pass


class SchemaMismatch(SimError):
    pass
