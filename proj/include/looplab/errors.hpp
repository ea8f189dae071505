#pragma once

#include <stdexcept>
#include <string>

namespace looplab {

// Base of every error the library raises. `kind()` is a stable tag the CLI
// prints alongside the message.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& m) : Error("shape_error", m) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& m) : Error("numeric_error", m) {}
};

class ContractError : public Error {
public:
    explicit ContractError(const std::string& m) : Error("contract_error", m) {}
};

class UnsupportedOpError : public Error {
public:
    explicit UnsupportedOpError(const std::string& m) : Error("unsupported_op", m) {}
};

class VocabularyError : public Error {
public:
    explicit VocabularyError(const std::string& m) : Error("vocabulary_error", m) {}
};

class CapacityError : public Error {
public:
    explicit CapacityError(const std::string& m) : Error("capacity_error", m) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& m) : Error("io_error", m) {}
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& m) : Error("validation_error", m) {}
};

class DegenerateCovarianceError : public Error {
public:
    explicit DegenerateCovarianceError(const std::string& m)
        : Error("degenerate_covariance", m) {}
};

} // namespace looplab
