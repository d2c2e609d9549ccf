#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nmim {

// All recoverable failures surface as nmim::Error with a message that names
// the failing operation and the offending values.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

inline void format_into(std::ostringstream&) {}

template <typename T, typename... Rest>
void format_into(std::ostringstream& oss, T&& head, Rest&&... rest) {
    oss << std::forward<T>(head);
    format_into(oss, std::forward<Rest>(rest)...);
}

} // namespace detail

template <typename... Args>
[[noreturn]] void fail(Args&&... args) {
    std::ostringstream oss;
    detail::format_into(oss, std::forward<Args>(args)...);
    throw Error(oss.str());
}

template <typename... Args>
void require(bool cond, Args&&... args) {
    if (!cond) {
        fail(std::forward<Args>(args)...);
    }
}

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int e : s) {
        require(e >= 0, "shape extent must be non-negative, got ", shape_str(s));
        n *= e;
    }
    return n;
}

} // namespace nmim
