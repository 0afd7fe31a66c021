#include "margingate/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "margingate/errors.hpp"
#include "margingate/hash.hpp"

namespace margingate {

std::string format_double(double value) {
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  if (std::isnan(value)) return "nan";
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
  if (ec != std::errc{}) throw InvalidArgument("format_double: conversion failed");
  return std::string(buf, end);
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  return out;
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const std::string& why) {
  throw ConfigError("config key '" + key + "' = '" + value + "': " + why);
}

long long to_int(const std::string& key, const std::string& v) {
  long long out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) bad(key, v, "expected an integer");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) bad(key, v, "expected an unsigned integer");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  if (v == "inf" || v == "+inf") return std::numeric_limits<double>::infinity();
  if (!v.empty() && v.find('/') != std::string::npos) {
    const auto slash = v.find('/');
    const double num = to_double(key, trim(v.substr(0, slash)));
    const double den = to_double(key, trim(v.substr(slash + 1)));
    if (den == 0.0) bad(key, v, "division by zero");
    return num / den;
  }
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) bad(key, v, "expected a number");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  bad(key, v, "expected true or false");
}

int to_int32(const std::string& key, const std::string& v) {
  const long long x = to_int(key, v);
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) bad(key, v, "out of range");
  return static_cast<int>(x);
}

template <typename T, typename F>
std::string join(const std::vector<T>& items, F&& fmt) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ",";
    out += fmt(items[i]);
  }
  return out;
}

std::string strategy_name(Verifier::Strategy s) {
  return s == Verifier::Strategy::incremental ? "incremental" : "full-recompute";
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::string transfer_text(const std::vector<TransferCorpusSpec>& corpora) {
  return join(corpora, [](const TransferCorpusSpec& t) {
    return t.name + ":" + std::to_string(t.corpus.seed) + ":" + std::to_string(t.corpus.prompt_count) + ":" +
           std::to_string(t.corpus.prompt_length) + ":" + std::to_string(t.corpus.length_jitter);
  });
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
#define MG_INT(KEY, EXPR)                                                                        \
  t[KEY] = {[](RunConfig& c, const std::string& k, const std::string& v) { EXPR = to_int32(k, v); }, \
            [](const RunConfig& c) { return std::to_string(EXPR); }}
#define MG_U64(KEY, EXPR)                                                                      \
  t[KEY] = {[](RunConfig& c, const std::string& k, const std::string& v) { EXPR = to_u64(k, v); }, \
            [](const RunConfig& c) { return std::to_string(EXPR); }}
#define MG_DOUBLE(KEY, EXPR)                                                                      \
  t[KEY] = {[](RunConfig& c, const std::string& k, const std::string& v) { EXPR = to_double(k, v); }, \
            [](const RunConfig& c) { return format_double(EXPR); }}
#define MG_BOOL(KEY, EXPR)                                                                      \
  t[KEY] = {[](RunConfig& c, const std::string& k, const std::string& v) { EXPR = to_bool(k, v); }, \
            [](const RunConfig& c) { return std::string(EXPR ? "true" : "false"); }}

    MG_INT("model.layers", c.model.layers);
    MG_INT("model.heads", c.model.heads);
    MG_INT("model.d_model", c.model.d_model);
    MG_INT("model.vocab", c.model.vocab);
    MG_INT("model.max_positions", c.model.max_positions);
    MG_INT("model.mlp_mult", c.model.mlp_mult);
    MG_U64("model.seed", c.model.seed);
    MG_DOUBLE("model.embed_std", c.model.embed_std);

    t["numerics.mode"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) {
          try {
            c.numerics.mode = parse_numerics_mode(v);
          } catch (const InvalidArgument& e) {
            bad(k, v, e.what());
          }
        },
        [](const RunConfig& c) { return std::string(to_string(c.numerics.mode)); }};
    t["numerics.chunk_schedule"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.numerics.chunk_schedule.clear();
          for (const auto& item : split(v, ',')) {
            const auto colon = item.find('=');
            if (colon == std::string::npos) bad(k, v, "entries must be batch=chunks");
            const int bs = to_int32(k, trim(item.substr(0, colon)));
            const int ch = to_int32(k, trim(item.substr(colon + 1)));
            if (!c.numerics.chunk_schedule.emplace(bs, ch).second) bad(k, v, "duplicate batch size");
          }
        },
        [](const RunConfig& c) {
          std::string out;
          for (const auto& [bs, ch] : c.numerics.chunk_schedule) {
            if (!out.empty()) out += ",";
            out += std::to_string(bs) + "=" + std::to_string(ch);
          }
          return out;
        }};
    MG_DOUBLE("numerics.noise_amplitude", c.numerics.noise_amplitude);
    MG_U64("numerics.noise_seed", c.numerics.noise_seed);

    MG_INT("corpus.prompts", c.corpus.prompt_count);
    MG_INT("corpus.length", c.corpus.prompt_length);
    MG_INT("corpus.length_jitter", c.corpus.length_jitter);
    MG_U64("corpus.seed", c.corpus.seed);
    t["corpus.file"] = {
        [](RunConfig& c, const std::string&, const std::string& v) {
          if (v.empty() || v == "none") {
            c.corpus_file.reset();
          } else {
            c.corpus_file = v;
          }
        },
        [](const RunConfig& c) { return c.corpus_file.value_or("none"); }};

    MG_INT("decode.max_new_tokens", c.decode.max_new_tokens);
    t["decode.eos"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "none") {
            c.decode.eos_token.reset();
          } else {
            c.decode.eos_token = to_int32(k, v);
          }
        },
        [](const RunConfig& c) {
          return c.decode.eos_token ? std::to_string(*c.decode.eos_token) : std::string("none");
        }};
    MG_INT("decode.top_k", c.decode.top_k);
    MG_BOOL("decode.snapshot_kv", c.decode.snapshot_kv);

    t["batch.sizes"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.batch_sizes.clear();
          for (const auto& item : split(v, ',')) c.batch_sizes.push_back(to_int32(k, item));
        },
        [](const RunConfig& c) { return join(c.batch_sizes, [](int x) { return std::to_string(x); }); }};
    t["batch.layout"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) {
          try {
            c.layout = parse_layout_kind(v);
          } catch (const InvalidArgument& e) {
            bad(k, v, e.what());
          }
        },
        [](const RunConfig& c) { return std::string(to_string(c.layout)); }};
    MG_INT("batch.protected_row", c.protected_row);
    MG_BOOL("batch.share_rows", c.share_rows);

    MG_DOUBLE("gate.tau", c.gate.tau);
    t["gate.mode"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) {
          try {
            c.gate.mode = parse_gate_mode(v);
          } catch (const InvalidArgument& e) {
            bad(k, v, e.what());
          }
        },
        [](const RunConfig& c) { return std::string(to_string(c.gate.mode)); }};
    t["gate.verifier"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "incremental") {
            c.verifier = Verifier::Strategy::incremental;
          } else if (v == "full-recompute") {
            c.verifier = Verifier::Strategy::full_recompute;
          } else {
            bad(k, v, "expected incremental or full-recompute");
          }
        },
        [](const RunConfig& c) { return strategy_name(c.verifier); }};

    MG_INT("calibration.top_k", c.calibration_top_k);
    t["calibration.topk_source"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) {
          try {
            c.calibration_source = parse_topk_source(v);
          } catch (const InvalidArgument& e) {
            bad(k, v, e.what());
          }
        },
        [](const RunConfig& c) { return std::string(to_string(c.calibration_source)); }};

    t["sweep.grid"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.sweep_base.clear();
          for (const auto& item : split(v, ',')) c.sweep_base.push_back(to_double(k, item));
        },
        [](const RunConfig& c) { return join(c.sweep_base, [](double x) { return format_double(x); }); }};
    MG_DOUBLE("sweep.scale", c.sweep_scale);
    MG_DOUBLE("sweep.max_tau", c.sweep_max_tau);
    MG_BOOL("sweep.append_infinity", c.sweep_infinity);

    t["transfer.tau"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "auto") {
            c.transfer_tau.reset();
          } else {
            c.transfer_tau = to_double(k, v);
          }
        },
        [](const RunConfig& c) { return c.transfer_tau ? format_double(*c.transfer_tau) : std::string("auto"); }};
    t["transfer.corpora"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.transfer_corpora.clear();
          for (const auto& item : split(v, ',')) {
            const auto parts = split(item, ':');
            if (parts.size() != 5 || parts[0].empty()) bad(k, v, "entries must be name:seed:prompts:length:jitter");
            TransferCorpusSpec spec;
            spec.name = parts[0];
            spec.corpus.seed = to_u64(k, parts[1]);
            spec.corpus.prompt_count = to_int32(k, parts[2]);
            spec.corpus.prompt_length = to_int32(k, parts[3]);
            spec.corpus.length_jitter = to_int32(k, parts[4]);
            c.transfer_corpora.push_back(spec);
          }
        },
        [](const RunConfig& c) { return transfer_text(c.transfer_corpora); }};

    MG_INT("diagnostics.pre_window", c.kv.pre_window);
    MG_INT("diagnostics.post_window", c.kv.post_window);
    t["diagnostics.deltas"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.geometry_deltas.clear();
          for (const auto& item : split(v, ',')) c.geometry_deltas.push_back(to_double(k, item));
        },
        [](const RunConfig& c) { return join(c.geometry_deltas, [](double x) { return format_double(x); }); }};
    t["diagnostics.rank_buckets"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.rank_buckets.clear();
          for (const auto& item : split(v, ',')) c.rank_buckets.push_back(to_int32(k, item));
        },
        [](const RunConfig& c) { return join(c.rank_buckets, [](int x) { return std::to_string(x); }); }};
    t["diagnostics.recall_taus"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.recall_taus.clear();
          for (const auto& item : split(v, ',')) c.recall_taus.push_back(to_double(k, item));
        },
        [](const RunConfig& c) { return join(c.recall_taus, [](double x) { return format_double(x); }); }};

    MG_BOOL("diagnostics.export_traces", c.export_traces);

    MG_INT("run.workers", c.workers);
    t["run.out"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.out = v; },
                    [](const RunConfig& c) { return c.out; }};
#undef MG_INT
#undef MG_U64
#undef MG_DOUBLE
#undef MG_BOOL
    return t;
  }();
  return table;
}

}  // namespace

RunConfig::RunConfig() {
  decode.max_new_tokens = 128;
  decode.snapshot_kv = true;
  transfer_corpora = {
      {"heldout-a", CorpusSpec{64, 32, 0, 9001}},
      {"heldout-b", CorpusSpec{64, 48, 8, 9002}},
  };
}

void RunConfig::validate() const {
  auto wrap = [](auto&& fn) {
    try {
      fn();
    } catch (const InvalidArgument& e) {
      throw ConfigError(e.what());
    } catch (const ModeViolation& e) {
      throw ConfigError(e.what());
    }
  };
  wrap([&] { model.validate(); });
  wrap([&] { numerics.validate(); });
  wrap([&] { corpus.validate(); });
  wrap([&] { decode.validate(); });
  wrap([&] { gate.validate(); });
  if (batch_sizes.empty()) throw ConfigError("batch.sizes must not be empty");
  if (std::set<int>(batch_sizes.begin(), batch_sizes.end()).size() != batch_sizes.size()) {
    throw ConfigError("batch.sizes has duplicates");
  }
  for (int bs : batch_sizes) {
    if (bs < 1) throw ConfigError("batch.sizes entries must be >= 1");
    if (protected_row < 0 || protected_row >= bs) throw ConfigError("batch.protected_row outside a batch size");
  }
  if (calibration_top_k < 1) throw ConfigError("calibration.top_k must be >= 1");
  if (!(sweep_scale > 0.0) || !std::isfinite(sweep_scale)) throw ConfigError("sweep.scale must be finite and > 0");
  if (!(sweep_max_tau >= 0.0)) throw ConfigError("sweep.max_tau must be >= 0");
  wrap([&] {
    SweepPlan plan;
    plan.base = sweep_grid_base();
    sweep_grid(plan);
  });
  if (transfer_tau && (std::isnan(*transfer_tau) || *transfer_tau < 0.0)) {
    throw ConfigError("transfer.tau must be >= 0 or auto");
  }
  std::set<std::string> names;
  for (const auto& t : transfer_corpora) {
    wrap([&] { t.corpus.validate(); });
    if (!names.insert(t.name).second) throw ConfigError("transfer.corpora has duplicate name " + t.name);
  }
  if (kv.pre_window < 2 || kv.post_window < 0) throw ConfigError("diagnostics windows out of range");
  for (double d : geometry_deltas) {
    if (!(d > 0.0)) throw ConfigError("diagnostics.deltas must be > 0");
  }
  for (int b : rank_buckets) {
    if (b < 1) throw ConfigError("diagnostics.rank_buckets must be >= 1");
  }
  if (workers < 1) throw ConfigError("run.workers must be >= 1");
}

std::vector<double> RunConfig::sweep_grid_base() const {
  std::vector<double> out;
  out.reserve(sweep_base.size());
  for (double v : sweep_base) out.push_back(v * sweep_scale);
  return out;
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + " = " + field.get(*this) + "\n";
  return out;
}

std::string RunConfig::hash() const {
  Fnv1a64 h;
  for (const auto& [key, field] : fields()) {
    if (key.rfind("run.", 0) == 0) continue;
    h.update(key + " = " + field.get(*this) + "\n");
  }
  return hex64(h.value());
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  const auto& table = fields();
  const auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(config, key, value);
}

RunConfig parse_config(std::istream& in, const std::string& source) {
  RunConfig config;
  std::set<std::string> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line.erase(hash_pos);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = source + ":" + std::to_string(line_no);
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
    try {
      set_config_value(config, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  config.validate();
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  return parse_config(in, path.string());
}

}  // namespace margingate
