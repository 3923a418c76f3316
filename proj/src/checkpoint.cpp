#include "cab/checkpoint.hpp"

#include <map>

#include "cab/errors.hpp"
#include "text_io.hpp"

namespace cab {

namespace {

constexpr std::string_view kCheckpointTag = "cab-checkpoint 1";

std::string bool_text(bool b) { return b ? "true" : "false"; }

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  const auto n = detail::parse_int<std::size_t>(v);
  if (!n) throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return *n;
}

int parse_int(const std::string& key, const std::string& v) {
  const auto n = detail::parse_int<int>(v);
  if (!n) throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  return *n;
}

double parse_real(const std::string& key, const std::string& v) {
  const auto x = detail::parse_double(v);
  if (!x) throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  return *x;
}

}  // namespace

ConfigEntries model_config_entries(const ModelConfig& cfg) {
  using detail::format_double;
  return {
      {"task", std::string(task_name(cfg.task))},
      {"model", std::string(model_kind_name(cfg.kind))},
      {"seq_len", std::to_string(cfg.seq_len)},
      {"d_in", std::to_string(cfg.d_in)},
      {"d_model", std::to_string(cfg.d_model)},
      {"heads", std::to_string(cfg.heads)},
      {"temporal_heads", std::to_string(cfg.temporal_heads)},
      {"d_k", std::to_string(cfg.d_k)},
      {"blocks", std::to_string(cfg.blocks)},
      {"d_ff", std::to_string(cfg.d_ff)},
      {"num_classes", std::to_string(cfg.num_classes)},
      {"positional_encoding", bool_text(cfg.positional_encoding)},
      {"lambda_raw", format_double(cfg.cab.lambda_raw)},
      {"beta_raw", format_double(cfg.cab.beta_raw)},
      {"tau_raw", format_double(cfg.cab.tau_raw)},
      {"c", std::to_string(cfg.cab.c)},
      {"lambda_mode", cfg.cab.lambda_mode == LambdaMode::learnable ? "learnable" : "fixed"},
      {"filtering", bool_text(cfg.cab.filtering)},
      {"beta_override", cfg.cab.beta_override ? format_double(*cfg.cab.beta_override) : "none"},
      {"learn_beta", bool_text(cfg.learn_beta)},
      {"learn_tau", bool_text(cfg.learn_tau)},
      {"lag_path", cfg.lag_path == LagPath::fft ? "fft" : "naive"},
      {"threads", std::to_string(cfg.threads)},
  };
}

ModelConfig model_config_from_entries(const ConfigEntries& entries) {
  ModelConfig cfg;
  for (const auto& [key, v] : entries) {
    if (key == "task") cfg.task = parse_task(v);
    else if (key == "model") cfg.kind = parse_model_kind(v);
    else if (key == "seq_len") cfg.seq_len = parse_size(key, v);
    else if (key == "d_in") cfg.d_in = parse_size(key, v);
    else if (key == "d_model") cfg.d_model = parse_size(key, v);
    else if (key == "heads") cfg.heads = parse_size(key, v);
    else if (key == "temporal_heads") cfg.temporal_heads = parse_size(key, v);
    else if (key == "d_k") cfg.d_k = parse_size(key, v);
    else if (key == "blocks") cfg.blocks = parse_size(key, v);
    else if (key == "d_ff") cfg.d_ff = parse_size(key, v);
    else if (key == "num_classes") cfg.num_classes = parse_size(key, v);
    else if (key == "positional_encoding") cfg.positional_encoding = parse_bool(key, v);
    else if (key == "lambda_raw") cfg.cab.lambda_raw = parse_real(key, v);
    else if (key == "beta_raw") cfg.cab.beta_raw = parse_real(key, v);
    else if (key == "tau_raw") cfg.cab.tau_raw = parse_real(key, v);
    else if (key == "c") cfg.cab.c = parse_int(key, v);
    else if (key == "lambda_mode") {
      if (v == "learnable") cfg.cab.lambda_mode = LambdaMode::learnable;
      else if (v == "fixed") cfg.cab.lambda_mode = LambdaMode::fixed;
      else throw ConfigError("config key 'lambda_mode': expected fixed or learnable, got '" + v + "'");
    } else if (key == "filtering") cfg.cab.filtering = parse_bool(key, v);
    else if (key == "beta_override") {
      if (v == "none") cfg.cab.beta_override.reset();
      else cfg.cab.beta_override = parse_real(key, v);
    } else if (key == "learn_beta") cfg.learn_beta = parse_bool(key, v);
    else if (key == "learn_tau") cfg.learn_tau = parse_bool(key, v);
    else if (key == "lag_path") {
      if (v == "fft") cfg.lag_path = LagPath::fft;
      else if (v == "naive") cfg.lag_path = LagPath::naive;
      else throw ConfigError("config key 'lag_path': expected fft or naive, got '" + v + "'");
    } else if (key == "threads") cfg.threads = parse_int(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  return cfg;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  std::string out(kCheckpointTag);
  const ConfigEntries entries = model_config_entries(params.config);
  out += "\nconfig " + std::to_string(entries.size()) + '\n';
  for (const auto& [k, v] : entries) out += k + '=' + v + '\n';
  out += "params " + std::to_string(params.set.size()) + '\n';
  for (const Param& p : params.set) {
    out += "param " + p.name + ' ' + std::to_string(p.value.rows()) + ' ' +
           std::to_string(p.value.cols()) + ' ' + (p.trainable ? "1" : "0") + '\n';
    detail::append_csv(out, p.value.values());
    out += '\n';
  }
  auto file = detail::open_for_write(path);
  file << out;
  if (!file) throw FileError("failed writing '" + path.string() + "'");
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  detail::LineReader r(path);
  std::string line = r.expect_line("format tag");
  if (line != kCheckpointTag)
    r.fail("format tag", "expected '" + std::string(kCheckpointTag) + "', got '" + line + "'");
  line = r.expect_line("config");
  const auto n_entries = detail::parse_int<std::size_t>(r.expect_key(line, "config"));
  if (!n_entries) r.fail("config", "expected an entry count");
  ConfigEntries entries;
  for (std::size_t i = 0; i < *n_entries; ++i) {
    line = r.expect_line("config");
    const auto eq = line.find('=');
    if (eq == std::string::npos) r.fail("config", "expected key=value, got '" + line + "'");
    entries.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  ModelParams params;
  try {
    params = init_model(model_config_from_entries(entries), 0);
  } catch (const ConfigError& e) {
    r.fail("config", e.what());
  }
  line = r.expect_line("params");
  const auto n_params = detail::parse_int<std::size_t>(r.expect_key(line, "params"));
  if (!n_params || *n_params != params.set.size())
    r.fail("params", "expected " + std::to_string(params.set.size()) + " parameters for this configuration");
  for (Param& p : params.set) {
    line = r.expect_line("param");
    const auto fields = detail::split(r.expect_key(line, "param"), ' ');
    if (fields.size() != 4) r.fail("param", "expected '<name> <rows> <cols> <trainable>'");
    if (fields[0] != p.name) r.fail("param", "expected parameter '" + p.name + "', got '" + std::string(fields[0]) + "'");
    const auto rows = detail::parse_int<std::size_t>(fields[1]);
    const auto cols = detail::parse_int<std::size_t>(fields[2]);
    if (!rows || !cols || *rows != p.value.rows() || *cols != p.value.cols())
      r.fail("param", "'" + p.name + "' should be " + p.value.shape_string());
    if (fields[3] != "0" && fields[3] != "1") r.fail("param", "trainable flag must be 0 or 1");
    p.trainable = fields[3] == "1";
    line = r.expect_line(p.name);
    const auto cells = detail::split(line, ',');
    if (cells.size() != p.value.size())
      r.fail(p.name, "expected " + std::to_string(p.value.size()) + " values, got " + std::to_string(cells.size()));
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const auto v = detail::parse_double(cells[i]);
      if (!v) r.fail(p.name, "not a number: '" + std::string(cells[i]) + "'");
      p.value[i] = *v;
    }
  }
  return params;
}

}  // namespace cab
