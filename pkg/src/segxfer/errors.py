class ContractViolation(ValueError):
    """Raised when an operation's preconditions are not met.

    ``module`` and ``code`` feed the CLI's one-line ``ERR <module>:<code>`` output.
    """

    def __init__(self, message: str, module: str = "core", code: str = "contract"):
        super().__init__(message)
        self.module = module
        self.code = code


def require(cond: bool, message: str, module: str = "core", code: str = "contract") -> None:
    if not cond:
        raise ContractViolation(message, module=module, code=code)
