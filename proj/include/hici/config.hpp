#pragma once

#include <charconv>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace hici {

struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class GlobalScope { all_segments, preceding_segments };

inline const char* to_string(GlobalScope s) {
  return s == GlobalScope::all_segments ? "all_segments" : "preceding_segments";
}

inline GlobalScope parse_scope(std::string_view v) {
  if (v == "all_segments" || v == "all") return GlobalScope::all_segments;
  if (v == "preceding_segments" || v == "preceding") return GlobalScope::preceding_segments;
  throw config_error("global_scope: expected all_segments or preceding_segments, got '" + std::string(v) + "'");
}

// Architectural constants of one HiCI layer.
struct HiCIConfig {
  std::size_t S = 4;    // segment length
  std::size_t M = 2;    // local slots
  std::size_t K = 2;    // global slots
  std::size_t H = 2;    // heads
  std::size_t d = 16;   // model width
  std::size_t d_b = 8;  // bottleneck width
  std::size_t d_s = 4;  // intermediate compression width
  bool causal_segment_mask = true;
  GlobalScope global_scope = GlobalScope::all_segments;
  double ln_eps = 1e-5;

  std::size_t head_dim_bottleneck() const { return d_b / H; }
  std::size_t head_dim_model() const { return d / H; }

  // Throws config_error naming the first violated constraint.
  void validate() const {
    auto fail = [](const std::string& m) { throw config_error("invalid HiCI config: " + m); };
    if (S == 0) fail("S must be positive");
    if (H == 0) fail("H must be positive");
    if (d == 0) fail("d must be positive");
    if (d % H) fail("d=" + std::to_string(d) + " not divisible by H=" + std::to_string(H));
    if (d_b % H) fail("d_b=" + std::to_string(d_b) + " not divisible by H=" + std::to_string(H));
    if (!(d_s > 0 && d_s < d_b && d_b < d))
      fail("need 0 < d_s < d_b < d, got d_s=" + std::to_string(d_s) + " d_b=" + std::to_string(d_b) +
           " d=" + std::to_string(d));
    if (K > 0 && M == 0) fail("K > 0 requires M > 0 (global integration pools the local slots)");
    if (!(ln_eps >= 0.0)) fail("ln_eps must be non-negative");
  }

  // The llama2-7b preset: M=8, K=4, H=8, d_b=512, d_s=128, S=2048 (8K context, N=4).
  static HiCIConfig llama2_7b() {
    HiCIConfig c;
    c.S = 2048, c.M = 8, c.K = 4, c.H = 8, c.d = 4096, c.d_b = 512, c.d_s = 128;
    return c;
  }

  static HiCIConfig llama2_13b() {
    HiCIConfig c;
    c.S = 2048, c.M = 8, c.K = 4, c.H = 10, c.d = 5120, c.d_b = 640, c.d_s = 160;
    return c;
  }

  friend bool operator==(const HiCIConfig&, const HiCIConfig&) = default;
};

namespace detail {
inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw config_error(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw config_error(key + ": expected on/off, got '" + v + "'");
}
}  // namespace detail

// Parses `key = value` lines ('#' starts a comment). Keys are exactly the
// HiCIConfig fields; S, M, K, H, d, d_b, d_s are required, the rest optional.
inline HiCIConfig parse_config(std::istream& in) {
  static const std::set<std::string> required = {"S", "M", "K", "H", "d", "d_b", "d_s"};
  static const std::set<std::string> optional = {"causal_segment_mask", "global_scope", "ln_eps"};
  HiCIConfig c;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw config_error("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string val = detail::trim(std::string_view(t).substr(eq + 1));
    if (!required.count(key) && !optional.count(key)) throw config_error("unknown config key '" + key + "'");
    if (!seen.insert(key).second) throw config_error("duplicate config key '" + key + "'");
    if (key == "S") c.S = detail::parse_size(key, val);
    else if (key == "M") c.M = detail::parse_size(key, val);
    else if (key == "K") c.K = detail::parse_size(key, val);
    else if (key == "H") c.H = detail::parse_size(key, val);
    else if (key == "d") c.d = detail::parse_size(key, val);
    else if (key == "d_b") c.d_b = detail::parse_size(key, val);
    else if (key == "d_s") c.d_s = detail::parse_size(key, val);
    else if (key == "causal_segment_mask") c.causal_segment_mask = detail::parse_bool(key, val);
    else if (key == "global_scope") c.global_scope = parse_scope(val);
    else if (key == "ln_eps") {
      try {
        std::size_t used = 0;
        c.ln_eps = std::stod(val, &used);
        if (used != val.size()) throw std::invalid_argument(val);
      } catch (const std::exception&) {
        throw config_error("ln_eps: expected a number, got '" + val + "'");
      }
    }
  }
  for (const auto& k : required)
    if (!seen.count(k)) throw config_error("missing config key '" + k + "'");
  return c;
}

inline HiCIConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline HiCIConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file '" + path + "'");
  return parse_config(in);
}

inline std::string to_text(const HiCIConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "S = " << c.S << "\nM = " << c.M << "\nK = " << c.K << "\nH = " << c.H << "\nd = " << c.d
     << "\nd_b = " << c.d_b << "\nd_s = " << c.d_s << "\ncausal_segment_mask = " << (c.causal_segment_mask ? "on" : "off")
     << "\nglobal_scope = " << to_string(c.global_scope) << "\nln_eps = " << c.ln_eps << '\n';
  return os.str();
}

}  // namespace hici
