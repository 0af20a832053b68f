#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ergolab {

enum class ErrorCode {
    InvalidSpec,
    InvalidConfig,
    WindowTooLarge,
    Unresolved,
    ScanBudget,
    NotSeparated,
    CapacityExceeded,
    InsufficientCodewords,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::WindowTooLarge: return "WindowTooLarge";
    case ErrorCode::Unresolved: return "Unresolved";
    case ErrorCode::ScanBudget: return "ScanBudget";
    case ErrorCode::NotSeparated: return "NotSeparated";
    case ErrorCode::CapacityExceeded: return "CapacityExceeded";
    case ErrorCode::InsufficientCodewords: return "InsufficientCodewords";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

inline void require(bool cond, ErrorCode code, const std::string& what) {
    if (!cond) throw Error(code, what);
}

} // namespace ergolab
