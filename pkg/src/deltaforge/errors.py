"""Exception hierarchy shared by every deltaforge module."""


class DeltaForgeError(Exception):
    """Base class. The CLI maps these to exit code 2 (data error)."""

    code = "error"

    def to_dict(self) -> dict:
        return {"error": self.code, "message": str(self)}


class MalformedHeader(DeltaForgeError):
    code = "malformed_header"


class OffsetOverlap(DeltaForgeError):
    code = "offset_overlap"


class UnsupportedDtype(DeltaForgeError):
    code = "unsupported_dtype"


class IoFailure(DeltaForgeError):
    code = "io_failure"


class ShapeMismatch(DeltaForgeError):
    code = "shape_mismatch"


class NameSetMismatch(DeltaForgeError):
    code = "name_set_mismatch"

    def __init__(self, missing_in_pre, missing_in_sft):
        self.missing_in_pre = sorted(missing_in_pre)
        self.missing_in_sft = sorted(missing_in_sft)
        parts = []
        if self.missing_in_pre:
            parts.append("only in fine-tuned: " + ", ".join(self.missing_in_pre))
        if self.missing_in_sft:
            parts.append("only in base: " + ", ".join(self.missing_in_sft))
        super().__init__("tensor name sets differ (" + "; ".join(parts) + ")")


class BaseMismatch(DeltaForgeError):
    code = "base_mismatch"

    def __init__(self, expected: str, found: str, what: str = "task vector"):
        self.expected = expected
        self.found = found
        super().__init__(
            f"{what} was extracted against base {found} but target base is {expected}"
        )


class EmptyInput(DeltaForgeError):
    code = "empty_input"


class EmptyMatrix(DeltaForgeError):
    code = "empty_matrix"


class UnclassifiedTensor(DeltaForgeError):
    code = "unclassified_tensor"


class UnknownFamily(DeltaForgeError):
    code = "unknown_family"


class UnknownTask(DeltaForgeError):
    code = "unknown_task"


class InvalidRate(DeltaForgeError):
    code = "invalid_rate"


class DimMismatch(DeltaForgeError):
    code = "dim_mismatch"


class DegenerateDataset(DeltaForgeError):
    code = "degenerate_dataset"


class MissingInput(DeltaForgeError):
    code = "missing_input"


class EmptySplit(DeltaForgeError):
    code = "empty_split"


class RecipeError(DeltaForgeError):
    code = "recipe_error"


class LabBoundsError(DeltaForgeError):
    code = "lab_bounds"
