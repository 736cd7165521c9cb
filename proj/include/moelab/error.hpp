#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace moelab {

// Error taxonomy shared across the library. `kind()` is a stable
// machine-readable token; the CLI prints it verbatim on failure.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& msg)
        : std::runtime_error(msg), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& m) : Error("shape", m) {}
};
struct IndexError : Error {
    explicit IndexError(const std::string& m) : Error("index", m) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& m) : Error("numeric", m) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error("config", m) {}
};
struct RegistryError : Error {
    explicit RegistryError(const std::string& m) : Error("registry", m) {}
};
struct SchemeError : Error {
    explicit SchemeError(const std::string& m) : Error("scheme", m) {}
};
struct SpecError : Error {
    explicit SpecError(const std::string& m) : Error("spec", m) {}
};
struct IoError : Error {
    explicit IoError(const std::string& m) : Error("io", m) {}
};
struct FormatError : Error {
    explicit FormatError(const std::string& m) : Error("format", m) {}
};
struct TraceError : Error {
    explicit TraceError(const std::string& m) : Error("trace", m) {}
};

inline void require(bool cond, std::string_view kind, const std::string& msg) {
    if (!cond) throw Error(std::string(kind), msg);
}

}  // namespace moelab
