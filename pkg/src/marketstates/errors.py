"""Exception type shared by all pipeline stages."""


class PipelineError(ValueError):
    """A stage-level failure that names the operation which raised it.

    The message is rendered as ``"<module>.<operation>: <detail>"`` so the CLI can
    print it unchanged.
    """

    def __init__(self, operation: str, detail: str):
        self.operation = operation
        self.detail = detail
        super().__init__(f"{operation}: {detail}")
