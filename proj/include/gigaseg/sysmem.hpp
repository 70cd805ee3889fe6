#pragma once

// Process memory counters from /proc (Linux). Values are bytes; 0 when the
// counter is unavailable.

#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>

namespace gigaseg {

namespace detail {

inline std::size_t status_kb(const char* key) {
  std::ifstream in("/proc/self/status");
  std::string line;
  const std::string k = std::string(key) + ":";
  while (std::getline(in, line))
    if (line.rfind(k, 0) == 0) {
      std::istringstream is(line.substr(k.size()));
      std::size_t kb = 0;
      is >> kb;
      return kb;
    }
  return 0;
}

}  // namespace detail

inline std::size_t current_rss_bytes() { return detail::status_kb("VmRSS") * 1024; }
inline std::size_t peak_rss_bytes() { return detail::status_kb("VmHWM") * 1024; }

// Resets the peak counter to the current RSS. Returns false if the kernel
// refused.
inline bool reset_peak_rss() {
  std::ofstream out("/proc/self/clear_refs");
  if (!out) return false;
  out << "5";
  out.flush();
  return static_cast<bool>(out);
}

}  // namespace gigaseg
