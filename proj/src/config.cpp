#include "wdfq/config.hpp"

#include <cstddef>
#include <fstream>
#include <sstream>
#include <vector>

#include "wdfq/errors.hpp"

namespace wdfq {

namespace {

std::string trim(const std::string& s) {
  const std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  std::int64_t out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty())
    raise(ErrorCode::Config, "config key '" + key + "' wants an integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty())
    raise(ErrorCode::Config, "config key '" + key + "' wants a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  raise(ErrorCode::Config, "config key '" + key + "' wants true/false/1/0, got '" + v + "'");
}

void apply_key(PipelineConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "wavelet")
    cfg.wavelet = parse_bool(key, value);
  else if (key == "c0")
    cfg.backbone.c0 = parse_int(key, value);
  else if (key == "c3")
    cfg.backbone.c3 = parse_int(key, value);
  else if (key == "c4")
    cfg.backbone.c4 = parse_int(key, value);
  else if (key == "c5")
    cfg.backbone.c5 = parse_int(key, value);
  else if (key == "blocks")
    cfg.backbone.blocks = static_cast<int>(parse_int(key, value));
  else if (key == "ce")
    cfg.ce = parse_int(key, value);
  else if (key == "d")
    cfg.d = parse_int(key, value);
  else if (key == "heads")
    cfg.heads = static_cast<int>(parse_int(key, value));
  else if (key == "layers")
    cfg.layers = static_cast<int>(parse_int(key, value));
  else if (key == "queries")
    cfg.queries = parse_int(key, value);
  else if (key == "points")
    cfg.points = static_cast<int>(parse_int(key, value));
  else if (key == "rep_blocks")
    cfg.rep_blocks = static_cast<int>(parse_int(key, value));
  else if (key == "classes")
    cfg.classes = parse_int(key, value);
  else if (key == "lambda_cls")
    cfg.loss_weights.cls = parse_double(key, value);
  else if (key == "lambda_l1")
    cfg.loss_weights.l1 = parse_double(key, value);
  else if (key == "lambda_giou")
    cfg.loss_weights.giou = parse_double(key, value);
  else if (key == "seed")
    cfg.seed = static_cast<std::uint64_t>(parse_int(key, value));
  else if (key == "step_size")
    cfg.step_size = parse_double(key, value);
  else if (key == "steps")
    cfg.steps = static_cast<int>(parse_int(key, value));
  else
    raise(ErrorCode::Config, "unknown config key '" + key + "'");
}

}  // namespace

void PipelineConfig::validate() const {
  backbone.validate();
  hfe().validate();
  fqs().validate();
  detect().validate();
  if (loss_weights.cls < 0.0 || loss_weights.l1 < 0.0 || loss_weights.giou < 0.0)
    raise(ErrorCode::Config, "loss weights must be nonnegative");
  if (!(step_size > 0.0)) raise(ErrorCode::Config, "step_size must be positive");
  if (steps < 0) raise(ErrorCode::Config, "steps must be nonnegative");
}

HfeConfig PipelineConfig::hfe() const {
  HfeConfig c;
  c.c3 = backbone.c3;
  c.c4 = backbone.c4;
  c.c5 = backbone.c5;
  c.ce = ce;
  c.heads = heads;
  c.rep_blocks = rep_blocks;
  return c;
}

FqsConfig PipelineConfig::fqs() const {
  FqsConfig c;
  c.d = d;
  c.ce = ce;
  c.heads = heads;
  c.points = points;
  c.layers = layers;
  c.queries = queries;
  return c;
}

DetectConfig PipelineConfig::detect() const {
  DetectConfig c;
  c.d = d;
  c.classes = classes;
  return c;
}

PipelineConfig base_profile(const std::string& name) {
  if (name == "paper") return PipelineConfig{};
  if (name == "test") {
    PipelineConfig cfg;
    cfg.backbone = BackboneConfig{16, 32, 64, 128, 1};
    cfg.ce = 32;
    cfg.d = 32;
    cfg.heads = 2;
    cfg.layers = 2;
    cfg.queries = 10;
    cfg.points = 2;
    cfg.rep_blocks = 1;
    return cfg;
  }
  raise(ErrorCode::Config, "unknown profile '" + name + "' (expected paper or test)");
}

PipelineConfig parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::string profile;
  bool saw_profile = false;

  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      raise(ErrorCode::Config,
            "config line " + std::to_string(lineno) + " is not key=value: '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      raise(ErrorCode::Config,
            "config line " + std::to_string(lineno) + " has an empty key or value");
    if (key == "profile") {
      if (saw_profile) raise(ErrorCode::Config, "config sets 'profile' more than once");
      saw_profile = true;
      profile = value;
    } else {
      entries.emplace_back(key, value);
    }
  }

  PipelineConfig cfg = saw_profile ? base_profile(profile) : PipelineConfig{};
  for (const auto& [key, value] : entries) apply_key(cfg, key, value);
  cfg.validate();
  return cfg;
}

PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::Io, "cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

}  // namespace wdfq
