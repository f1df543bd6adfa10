#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace wf {

enum class ErrorKind {
    MalformedHeader,
    OffsetOverlap,
    UnsupportedDtype,
    AllInputsFailed,
    RankUnsupported,
    LayoutMismatch,
    ShapeMismatch,
    AllMasked,
    EmptyMask,
    SinglePair,
    NonFiniteGradient,
    NonFiniteUpdate,
    StepOutOfRange,
    DivergedLoss,
    EmptyDataset,
    EmptyEmbedding,
    EmptyProbe,
    TaskDegenerate,
    EmptyInput,
    InvalidArgument,
    Io,
};

std::string_view to_string(ErrorKind kind);

/// Every domain failure in the library is reported as a wf::Error carrying a
/// machine-checkable kind. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

}  // namespace wf
