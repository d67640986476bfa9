#pragma once

#include <stdexcept>
#include <string>

namespace bsentinel {

/// Base class of every error raised by the library. The category decides the
/// process exit code used by the command-line tool.
class Error : public std::runtime_error {
public:
    enum class Category { config, data, numeric };

    Error(Category category, const std::string& what)
        : std::runtime_error(what), category_(category) {}

    Category category() const noexcept { return category_; }

private:
    Category category_;
};

/// Invalid arguments, shapes or configuration values.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(Category::config, what) {}
};

class ShapeError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

/// Missing, truncated or corrupt input files and unreadable datasets.
class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(Category::data, what) {}
};

class IoError : public DataError {
public:
    using DataError::DataError;
};

/// Non-finite values or degenerate quantities (zero-norm vectors, NaN loss).
class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(Category::numeric, what) {}
};

}  // namespace bsentinel
