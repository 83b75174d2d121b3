// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace qgrade {

enum class ErrorCode {
    shape_mismatch,
    invalid_shape,
    non_finite_input,
    not_scalar,
    detached_graph,
    invalid_block_size,
    invalid_rank,
    invalid_alpha,
    invalid_config,
    token_out_of_range,
    sequence_too_long,
    wrong_head,
    target_out_of_range,
    length_mismatch,
    empty_input,
    state_mismatch,
    empty_dataset,
    incompatible_objective,
    parse_error,
    duplicate_id,
    score_out_of_range,
    invalid_spec,
    invalid_grade,
    incompatible_checkpoint,
    io_error,
};

inline const char* error_code_name(ErrorCode c) {
    switch (c) {
        case ErrorCode::shape_mismatch: return "ShapeMismatch";
        case ErrorCode::invalid_shape: return "InvalidShape";
        case ErrorCode::non_finite_input: return "NonFiniteInput";
        case ErrorCode::not_scalar: return "NotScalar";
        case ErrorCode::detached_graph: return "DetachedGraph";
        case ErrorCode::invalid_block_size: return "InvalidBlockSize";
        case ErrorCode::invalid_rank: return "InvalidRank";
        case ErrorCode::invalid_alpha: return "InvalidAlpha";
        case ErrorCode::invalid_config: return "InvalidConfig";
        case ErrorCode::token_out_of_range: return "TokenOutOfRange";
        case ErrorCode::sequence_too_long: return "SequenceTooLong";
        case ErrorCode::wrong_head: return "WrongHead";
        case ErrorCode::target_out_of_range: return "TargetOutOfRange";
        case ErrorCode::length_mismatch: return "LengthMismatch";
        case ErrorCode::empty_input: return "EmptyInput";
        case ErrorCode::state_mismatch: return "StateMismatch";
        case ErrorCode::empty_dataset: return "EmptyDataset";
        case ErrorCode::incompatible_objective: return "IncompatibleObjective";
        case ErrorCode::parse_error: return "ParseError";
        case ErrorCode::duplicate_id: return "DuplicateId";
        case ErrorCode::score_out_of_range: return "ScoreOutOfRange";
        case ErrorCode::invalid_spec: return "InvalidSpec";
        case ErrorCode::invalid_grade: return "InvalidGrade";
        case ErrorCode::incompatible_checkpoint: return "IncompatibleCheckpoint";
        case ErrorCode::io_error: return "IoError";
    }
    return "Unknown";
}

/// Library-wide exception carrying a machine-checkable code.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
    if (!condition) fail(code, message);
}

} // namespace qgrade
