class SchemaError(ValueError):
    """A record in an annotation or protocol file does not match the schema."""

    def __init__(self, record, field, message):
        self.record = record
        self.field = field
        super().__init__(f"record {record!r}, field {field!r}: {message}")


class IntegrityError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component, batch_ids=()):
        self.component = component
        self.batch_ids = list(batch_ids)
        super().__init__(f"non-finite loss component {component!r} (batch: {self.batch_ids})")


class CheckpointError(IOError):
    pass
