#pragma once

#include <stdexcept>
#include <string>

namespace gavatar {

// Invalid argument shapes, counts or ranges.
class ParameterError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Non-finite values where the contract requires finite ones.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed files: bad magic, truncation, checksum or version mismatch.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// An iterative procedure failed to reach its tolerance.
class ConvergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Wire-protocol violations: bad magic, version, sizes or shapes.
class ProtocolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// The guidance service reported a failure (HTTP 4xx/5xx with a message).
class GuidanceError : public std::runtime_error {
public:
    GuidanceError(int status, const std::string& message)
        : std::runtime_error("guidance service error " + std::to_string(status) + ": " + message), status_(status)
    {
    }
    int status() const { return status_; }

private:
    int status_;
};

// Connection failures and timeouts; worth retrying.
class TransientError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace gavatar

namespace gavatar {

// Training stopped early; the scene was restored to the last good snapshot.
class TrainingAborted : public std::runtime_error {
public:
    TrainingAborted(long long iteration, const std::string& reason)
        : std::runtime_error("training aborted at iteration " + std::to_string(iteration) + ": " + reason),
          iteration_(iteration)
    {
    }
    long long iteration() const { return iteration_; }

private:
    long long iteration_;
};

} // namespace gavatar
