#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace atx {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// All knobs of mask generation and guided transfer.
struct GuidanceConfig {
  int T = 60;
  double theta_mask = -0.2;
  double omega_mix = 0.98;
  double lambda_app = 0.1;
  double lambda_struct = 1.0;
  double lambda_mse = 0.1;
  double tau = 0.5;
  int n_resample = 10;
  double mask_guidance_fraction = 0.5;
  double mask_skip_prob = 0.2;
  double guidance_scale = 30.0;
  std::uint64_t seed = 0;

  // Number of leading reverse steps that apply mask mixing.
  int mask_steps() const {
    return static_cast<int>(std::ceil(mask_guidance_fraction * static_cast<double>(T) - 1e-12));
  }

  void validate() const {
    auto fail = [](const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why); };
    if (T < 1) fail("T", "must be >= 1");
    if (!(omega_mix >= 0.0 && omega_mix <= 1.0)) fail("omega_mix", "must lie in [0, 1]");
    if (!(lambda_app >= 0.0)) fail("lambda_app", "must be nonnegative");
    if (!(lambda_struct >= 0.0)) fail("lambda_struct", "must be nonnegative");
    if (!(lambda_mse >= 0.0)) fail("lambda_mse", "must be nonnegative");
    if (!(tau > 0.0)) fail("tau", "must be positive");
    if (n_resample < 1) fail("n_resample", "must be >= 1");
    if (!(mask_guidance_fraction >= 0.0 && mask_guidance_fraction <= 1.0)) {
      fail("mask_guidance_fraction", "must lie in [0, 1]");
    }
    if (!(mask_skip_prob >= 0.0 && mask_skip_prob <= 1.0)) fail("mask_skip_prob", "must lie in [0, 1]");
    if (!(guidance_scale > 0.0)) fail("guidance_scale", "must be positive");
    if (!std::isfinite(theta_mask)) fail("theta_mask", "must be finite");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_value(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  T v{};
  is >> v;
  std::string rest;
  if (!is || (is >> rest)) throw ConfigError(key + ": cannot parse value '" + text + "'");
  return v;
}

}  // namespace detail

// Flat "key = value" text; '#' starts a comment. Values override defaults.
inline GuidanceConfig parse_config_text(const std::string& text) {
  GuidanceConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    using detail::parse_value;
    if (key == "T") cfg.T = parse_value<int>(key, val);
    else if (key == "theta_mask") cfg.theta_mask = parse_value<double>(key, val);
    else if (key == "omega_mix") cfg.omega_mix = parse_value<double>(key, val);
    else if (key == "lambda_app") cfg.lambda_app = parse_value<double>(key, val);
    else if (key == "lambda_struct") cfg.lambda_struct = parse_value<double>(key, val);
    else if (key == "lambda_mse") cfg.lambda_mse = parse_value<double>(key, val);
    else if (key == "tau") cfg.tau = parse_value<double>(key, val);
    else if (key == "n_resample") cfg.n_resample = parse_value<int>(key, val);
    else if (key == "mask_guidance_fraction") cfg.mask_guidance_fraction = parse_value<double>(key, val);
    else if (key == "mask_skip_prob") cfg.mask_skip_prob = parse_value<double>(key, val);
    else if (key == "guidance_scale") cfg.guidance_scale = parse_value<double>(key, val);
    else if (key == "seed") cfg.seed = parse_value<std::uint64_t>(key, val);
    else throw ConfigError(key + ": unknown configuration key");
  }
  cfg.validate();
  return cfg;
}

inline GuidanceConfig parse_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << is.rdbuf();
  return parse_config_text(buf.str());
}

}  // namespace atx
