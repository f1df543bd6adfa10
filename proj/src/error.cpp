#include "wf/error.hpp"

namespace wf {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::MalformedHeader: return "MalformedHeader";
        case ErrorKind::OffsetOverlap: return "OffsetOverlap";
        case ErrorKind::UnsupportedDtype: return "UnsupportedDtype";
        case ErrorKind::AllInputsFailed: return "AllInputsFailed";
        case ErrorKind::RankUnsupported: return "RankUnsupported";
        case ErrorKind::LayoutMismatch: return "LayoutMismatch";
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::AllMasked: return "AllMasked";
        case ErrorKind::EmptyMask: return "EmptyMask";
        case ErrorKind::SinglePair: return "SinglePair";
        case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
        case ErrorKind::NonFiniteUpdate: return "NonFiniteUpdate";
        case ErrorKind::StepOutOfRange: return "StepOutOfRange";
        case ErrorKind::DivergedLoss: return "DivergedLoss";
        case ErrorKind::EmptyDataset: return "EmptyDataset";
        case ErrorKind::EmptyEmbedding: return "EmptyEmbedding";
        case ErrorKind::EmptyProbe: return "EmptyProbe";
        case ErrorKind::TaskDegenerate: return "TaskDegenerate";
        case ErrorKind::EmptyInput: return "EmptyInput";
        case ErrorKind::InvalidArgument: return "InvalidArgument";
        case ErrorKind::Io: return "Io";
    }
    return "Unknown";
}

}  // namespace wf
