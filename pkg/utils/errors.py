"""
Error Types
Exception hierarchy shared by every stage; each error maps to a CLI exit code
"""

from typing import Any, Dict, List, Optional


class CDRNNError(Exception):
    """Base class for all library errors"""

    exit_code: int = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail

    def to_dict(self) -> Dict[str, Any]:
        """Structured form printed by the CLI"""
        return {
            'error': type(self).__name__,
            'detail': self.detail,
            'exit_code': self.exit_code,
        }


class ConfigurationError(CDRNNError):
    """Invalid specification, configuration or call arguments"""

    exit_code = 2

    def __init__(self, detail: str, violations: Optional[List[str]] = None):
        super().__init__(detail)
        self.violations = list(violations or [])

    def to_dict(self) -> Dict[str, Any]:
        out = super().to_dict()
        if self.violations:
            out['violations'] = self.violations
        return out


class DataError(CDRNNError):
    """Malformed or inconsistent input data"""

    exit_code = 3

    def __init__(self, detail: str, file: Optional[str] = None,
                 line: Optional[int] = None, column: Optional[str] = None):
        location = ", ".join(
            f"{key}={value}" for key, value in
            (('file', file), ('line', line), ('column', column)) if value is not None
        )
        super().__init__(f"{detail} ({location})" if location else detail)
        self.file = file
        self.line = line
        self.column = column

    def to_dict(self) -> Dict[str, Any]:
        out = super().to_dict()
        out.update({'file': self.file, 'line': self.line, 'column': self.column})
        return out


class NumericalError(CDRNNError):
    """Non-finite values during evaluation"""

    exit_code = 4

    def __init__(self, detail: str, response_index: Optional[int] = None):
        if response_index is not None:
            detail = f"{detail} (response index {response_index})"
        super().__init__(detail)
        self.response_index = response_index


class TrainingError(CDRNNError):
    """Training diverged or could not recover from loss spikes"""

    exit_code = 4

    def __init__(self, detail: str, log: Optional[List[Dict[str, Any]]] = None):
        super().__init__(detail)
        self.log = list(log or [])

    def to_dict(self) -> Dict[str, Any]:
        out = super().to_dict()
        out['log_tail'] = self.log[-5:]
        return out


class EnsembleError(CDRNNError):
    """One or more ensemble components failed"""

    exit_code = 4

    def __init__(self, detail: str, failures: Optional[List[Dict[str, Any]]] = None):
        super().__init__(detail)
        self.failures = list(failures or [])

    def to_dict(self) -> Dict[str, Any]:
        out = super().to_dict()
        out['failures'] = self.failures
        return out
