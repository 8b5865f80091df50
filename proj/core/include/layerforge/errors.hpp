#pragma once

#include <stdexcept>
#include <string>

namespace layerforge {

// Exit-code family shared with the CLI:
//   2 = argument / validation / format problems
//   3 = numeric problems (non-finite values, non-convergence)
//   4 = I/O problems
class Error : public std::runtime_error {
public:
    Error(int exit_code, const std::string& message)
        : std::runtime_error(message), exit_code_(exit_code) {}

    int exit_code() const noexcept { return exit_code_; }

private:
    int exit_code_;
};

class ArgumentError : public Error {
public:
    explicit ArgumentError(const std::string& m) : Error(2, m) {}
};

class DimensionError : public ArgumentError {
public:
    explicit DimensionError(const std::string& m) : ArgumentError(m) {}
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& m) : Error(2, m) {}
};

class FormatError : public Error {
public:
    explicit FormatError(const std::string& m) : Error(2, m) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& m) : Error(3, m) {}
};

class ConvergenceError : public NumericError {
public:
    explicit ConvergenceError(const std::string& m) : NumericError(m) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& m) : Error(4, m) {}
};

}  // namespace layerforge
