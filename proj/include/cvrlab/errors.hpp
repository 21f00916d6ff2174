#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cvrlab {

// Error classes map 1:1 onto CLI exit codes.
enum class ErrorCode : int {
    config = 2,
    data = 3,
    diverged = 4,
    verification = 5,
};

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }
    int exit_code() const noexcept { return static_cast<int>(code_); }

private:
    ErrorCode code_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(ErrorCode::config, what) {}
};

struct DataError : Error {
    explicit DataError(const std::string& what) : Error(ErrorCode::data, what) {}
};

struct VerificationError : Error {
    explicit VerificationError(const std::string& what)
        : Error(ErrorCode::verification, what) {}
};

// Non-finite loss or gradient during training; carries the step index.
class DivergedError : public Error {
public:
    DivergedError(std::int64_t step, const std::string& what)
        : Error(ErrorCode::diverged, "step " + std::to_string(step) + ": " + what),
          step_(step) {}

    std::int64_t step() const noexcept { return step_; }

private:
    std::int64_t step_;
};

}  // namespace cvrlab
