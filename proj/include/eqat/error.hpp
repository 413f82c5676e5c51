#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace eqat {

enum class ErrorKind {
    dimension,
    index,
    numeric,
    domain,
    data,
    state,
    format,
    invariant,
};

inline std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::dimension: return "dimension error";
        case ErrorKind::index: return "index error";
        case ErrorKind::numeric: return "numeric error";
        case ErrorKind::domain: return "domain error";
        case ErrorKind::data: return "data error";
        case ErrorKind::state: return "state error";
        case ErrorKind::format: return "format error";
        case ErrorKind::invariant: return "internal invariant violation";
    }
    return "error";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
    throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, std::string_view what) {
    if (!cond) {
        throw Error(kind, std::string(what));
    }
}

}  // namespace eqat
