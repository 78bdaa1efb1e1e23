#pragma once

#include <stdexcept>
#include <string>

namespace softforge {

// Domain error taxonomy. Everything derives from std::runtime_error except
// plain argument violations, which use std::invalid_argument directly.

struct SequenceTooLongError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidTokenError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidDepthError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmptyLossError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DivergedTrainingError : std::runtime_error {
    DivergedTrainingError(const std::string& msg, long step_index)
        : std::runtime_error(msg), step(step_index) {}
    long step;
};

struct NumericFailureError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParseError : std::runtime_error {
    ParseError(const std::string& msg, long line_number)
        : std::runtime_error(msg + " (line " + std::to_string(line_number) + ")"),
          line(line_number) {}
    long line;
};

struct SchemaError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checkpoint-specific failures.
struct NotACheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct VersionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CorruptionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidDistributionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EvaluationError : std::runtime_error {
    EvaluationError(const std::string& msg, long instruction_index)
        : std::runtime_error(msg), index(instruction_index) {}
    long index;
};

}  // namespace softforge
