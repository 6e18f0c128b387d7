#ifndef DOME_UTIL_HPP
#define DOME_UTIL_HPP

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dome {

namespace detail {

inline void str_append(std::ostringstream&) {}

template <typename T, typename... Rest>
void str_append(std::ostringstream& os, const T& v, const Rest&... rest) {
    os << v;
    str_append(os, rest...);
}

}  // namespace detail

// Concatenates arbitrary streamable values into a string.
template <typename... Args>
std::string str(const Args&... args) {
    std::ostringstream os;
    detail::str_append(os, args...);
    return os.str();
}

// Error codes for the binary file formats (OCCG / OCCS / OCCZ / checkpoints).
enum class FormatErrorCode {
    BadMagic,
    BadVersion,
    Truncated,
    LabelOutOfRange,
    Corrupt,
    OpenFailed,
};

inline const char* to_string(FormatErrorCode c) {
    switch (c) {
        case FormatErrorCode::BadMagic: return "BadMagic";
        case FormatErrorCode::BadVersion: return "BadVersion";
        case FormatErrorCode::Truncated: return "Truncated";
        case FormatErrorCode::LabelOutOfRange: return "LabelOutOfRange";
        case FormatErrorCode::Corrupt: return "Corrupt";
        case FormatErrorCode::OpenFailed: return "OpenFailed";
    }
    return "Unknown";
}

class FormatError : public std::runtime_error {
public:
    FormatError(FormatErrorCode code, const std::string& msg)
        : std::runtime_error(str(to_string(code), ": ", msg)), code_(code) {}
    FormatErrorCode code() const { return code_; }

private:
    FormatErrorCode code_;
};

// Worker cap: min(hardware_concurrency, DOME_THREADS). At least 1.
inline int max_threads() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("DOME_THREADS")) {
        int cap = std::atoi(env);
        if (cap >= 1 && cap < hw) hw = cap;
    }
    return hw;
}

// Runs fn(i) for i in [0, n). Tasks must write only to their own slots;
// results are then independent of the thread schedule.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
    int workers = std::min(n, max_threads());
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            for (int i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace dome

#endif  // DOME_UTIL_HPP
