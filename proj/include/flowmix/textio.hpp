#ifndef FLOWMIX_TEXTIO_HPP
#define FLOWMIX_TEXTIO_HPP

#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

namespace flowmix {

/// Shortest round-trippable decimal form used for every float we print.
inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string join_g17(const std::vector<double>& v, char sep = ',') {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out.push_back(sep);
    out += fmt_g17(v[i]);
  }
  return out;
}

/// Full-consumption numeric parse; false on anything but a clean double.
inline bool parse_double_strict(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* c = s.c_str();
  char* end = nullptr;
  out = std::strtod(c, &end);
  return end == c + s.size();
}

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = s.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

} // namespace flowmix

#endif
