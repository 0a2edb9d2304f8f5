#pragma once

// `key = value` configuration text for TrainConfig. Lines starting with '#'
// (after optional whitespace) and blank lines are ignored.

#include <charconv>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "featwise/errors.hpp"
#include "featwise/meta_trainer.hpp"

namespace featwise {

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <class T>
T parse_number(std::string_view key, std::string_view value) {
  T out{};
  const auto res = std::from_chars(value.data(), value.data() + value.size(), out);
  if (res.ec != std::errc() || res.ptr != value.data() + value.size()) {
    throw ConfigError("config: invalid value '" + std::string(value) + "' for " + std::string(key));
  }
  return out;
}

inline bool parse_flag(std::string_view key, std::string_view v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw ConfigError("config: invalid flag '" + std::string(v) + "' for " + std::string(key));
}

inline std::vector<std::string_view> split_list(std::string_view v) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const std::size_t comma = v.find(',', start);
    const auto item = trim(v.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::string shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

// Applies one `key = value` assignment to `cfg`.
inline void apply_config_entry(TrainConfig& cfg, std::string_view key, std::string_view value) {
  using detail::parse_number;
  if (key == "mode") {
    cfg.mode = parse_mode(value);
  } else if (key == "head") {
    cfg.head = parse_head(value);
  } else if (key == "alpha") {
    cfg.alpha = parse_number<double>(key, value);
  } else if (key == "iterations") {
    cfg.iterations = parse_number<std::size_t>(key, value);
  } else if (key == "inner_steps") {
    cfg.inner_steps = parse_number<std::size_t>(key, value);
  } else if (key == "ft_reg_weight") {
    cfg.ft_reg_weight = parse_number<double>(key, value);
  } else if (key == "ft_init_gamma") {
    cfg.ft_init_gamma = parse_number<double>(key, value);
  } else if (key == "ft_init_beta") {
    cfg.ft_init_beta = parse_number<double>(key, value);
  } else if (key == "way") {
    cfg.way = parse_number<std::size_t>(key, value);
  } else if (key == "shot") {
    cfg.shot = parse_number<std::size_t>(key, value);
  } else if (key == "query") {
    cfg.query = parse_number<std::size_t>(key, value);
  } else if (key == "seed") {
    cfg.seed = parse_number<std::uint64_t>(key, value);
  } else if (key == "optimizer") {
    cfg.optimizer = parse_optimizer(value);
  } else if (key == "encoder_widths") {
    cfg.encoder_widths.clear();
    for (auto item : detail::split_list(value)) cfg.encoder_widths.push_back(parse_number<std::size_t>(key, item));
    if (cfg.ft_blocks.size() != cfg.encoder_widths.size()) cfg.ft_blocks.assign(cfg.encoder_widths.size(), true);
  } else if (key == "ft_blocks") {
    cfg.ft_blocks.clear();
    for (auto item : detail::split_list(value)) cfg.ft_blocks.push_back(detail::parse_flag(key, item));
  } else {
    throw ConfigError("config: unknown key '" + std::string(key) + "'");
  }
}

inline TrainConfig parse_config(std::string_view text, TrainConfig cfg = {}) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view raw = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    const std::string_view line = detail::trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config: line " + std::to_string(line_no) + " is not of the form key = value");
    }
    apply_config_entry(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    if (end == text.size()) break;
  }
  return cfg;
}

inline std::string config_to_text(const TrainConfig& cfg) {
  std::ostringstream os;
  os << "mode = " << mode_name(cfg.mode) << '\n';
  os << "head = " << head_name(cfg.head) << '\n';
  os << "alpha = " << detail::shortest(cfg.alpha) << '\n';
  os << "iterations = " << cfg.iterations << '\n';
  os << "inner_steps = " << cfg.inner_steps << '\n';
  os << "ft_reg_weight = " << detail::shortest(cfg.ft_reg_weight) << '\n';
  os << "ft_init_gamma = " << detail::shortest(cfg.ft_init_gamma) << '\n';
  os << "ft_init_beta = " << detail::shortest(cfg.ft_init_beta) << '\n';
  os << "way = " << cfg.way << '\n';
  os << "shot = " << cfg.shot << '\n';
  os << "query = " << cfg.query << '\n';
  os << "seed = " << cfg.seed << '\n';
  os << "optimizer = " << optimizer_name(cfg.optimizer) << '\n';
  os << "encoder_widths = ";
  for (std::size_t i = 0; i < cfg.encoder_widths.size(); ++i) os << (i ? "," : "") << cfg.encoder_widths[i];
  os << "\nft_blocks = ";
  for (std::size_t i = 0; i < cfg.ft_blocks.size(); ++i) os << (i ? "," : "") << (cfg.ft_blocks[i] ? 1 : 0);
  os << '\n';
  return os.str();
}

}  // namespace featwise
