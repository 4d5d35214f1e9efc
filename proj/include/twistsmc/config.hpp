#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "twistsmc/checkpoint.hpp"
#include "twistsmc/engine.hpp"
#include "twistsmc/errors.hpp"
#include "twistsmc/learn.hpp"
#include "twistsmc/oracle.hpp"
#include "twistsmc/targets.hpp"
#include "twistsmc/twist.hpp"

namespace twistsmc {

/**
 * INI-style experiment config: `key = value` lines under [section] headers,
 * '#' comments. Unknown keys are ignored; unknown kinds and missing required
 * keys raise BadConfig. The `config-reference` CLI command documents every
 * key and default.
 */
class Config {
 public:
  static Config parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw BadConfig("config: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_string(buf.str());
  }

  static Config parse_string(const std::string& text) {
    Config cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw BadConfig("config: bad section header at line " +
                          std::to_string(lineno));
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw BadConfig("config: expected key = value at line " +
                        std::to_string(lineno));
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      cfg.values_[section + "." + key] = value;
    }
    return cfg;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string require(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end())
      throw BadConfig("config: missing required key '" + key + "'");
    return it->second;
  }

  long get_int(const std::string& key, long fallback) const {
    return has(key) ? parse_long(require(key), key) : fallback;
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    try {
      return std::stoull(require(key));
    } catch (...) {
      throw BadConfig("config: bad integer for '" + key + "'");
    }
  }

  double get_double(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    try {
      return std::stod(require(key));
    } catch (...) {
      throw BadConfig("config: bad number for '" + key + "'");
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    std::string v = require(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw BadConfig("config: bad boolean for '" + key + "'");
  }

  std::vector<std::string> get_list(const std::string& key,
                                    const std::string& fallback) const {
    std::string raw = get(key, fallback);
    std::vector<std::string> out;
    std::istringstream in(raw);
    std::string item;
    while (std::getline(in, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  std::vector<int> get_int_list(const std::string& key,
                                const std::string& fallback) const {
    std::vector<int> out;
    for (const auto& s : get_list(key, fallback))
      out.push_back(static_cast<int>(parse_long(s, key)));
    return out;
  }

  std::vector<double> get_double_list(const std::string& key,
                                      const std::string& fallback) const {
    std::vector<double> out;
    for (const auto& s : get_list(key, fallback)) {
      try {
        out.push_back(std::stod(s));
      } catch (...) {
        throw BadConfig("config: bad number in list '" + key + "'");
      }
    }
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  static long parse_long(const std::string& s, const std::string& key) {
    try {
      return std::stol(s);
    } catch (...) {
      throw BadConfig("config: bad integer for '" + key + "'");
    }
  }

  std::map<std::string, std::string> values_;
};

namespace configdetail {

inline Sequence parse_tokens(const std::string& text) {
  Sequence out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, '.')) {
    if (item.empty()) continue;
    out.push_back(static_cast<Token>(std::stol(item)));
  }
  return out;
}

inline std::string tokens_to_string(const Sequence& seq) {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += '.';
    out += std::to_string(seq[i]);
  }
  return out;
}

// rows: <dotted seq>,<value>
inline SeqTable load_seq_table_csv(const std::string& path,
                                   double default_value) {
  std::ifstream in(path);
  if (!in) throw BadConfig("config: cannot open table csv " + path);
  SeqTable table;
  table.default_value = default_value;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto comma = line.rfind(',');
    if (comma == std::string::npos)
      throw BadConfig("config: bad row in table csv " + path);
    table.values[parse_tokens(line.substr(0, comma))] =
        std::stod(line.substr(comma + 1));
  }
  return table;
}

// rows: <t>,<dotted seq>,<value>
inline std::vector<SeqTable> load_step_tables_csv(const std::string& path,
                                                  int horizon,
                                                  double default_value) {
  std::ifstream in(path);
  if (!in) throw BadConfig("config: cannot open step table csv " + path);
  std::vector<SeqTable> tables(horizon);
  for (auto& t : tables) t.default_value = default_value;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto c1 = line.find(',');
    auto c2 = line.rfind(',');
    if (c1 == std::string::npos || c2 == c1)
      throw BadConfig("config: bad row in step table csv " + path);
    int t = static_cast<int>(std::stol(line.substr(0, c1)));
    if (t < 1 || t > horizon)
      throw BadConfig("config: step out of range in " + path);
    tables[t - 1].values[parse_tokens(line.substr(c1 + 1, c2 - c1 - 1))] =
        std::stod(line.substr(c2 + 1));
  }
  return tables;
}

// rows: <dotted seq>,<obs id>,<prob>
inline std::unordered_map<Sequence, std::vector<double>, SequenceHash>
load_obs_rows_csv(const std::string& path, int alphabet,
                  const std::vector<double>& default_probs) {
  std::ifstream in(path);
  if (!in) throw BadConfig("config: cannot open observation csv " + path);
  std::unordered_map<Sequence, std::vector<double>, SequenceHash> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto c1 = line.find(',');
    auto c2 = line.rfind(',');
    if (c1 == std::string::npos || c2 == c1)
      throw BadConfig("config: bad row in observation csv " + path);
    Sequence seq = parse_tokens(line.substr(0, c1));
    int o = static_cast<int>(std::stol(line.substr(c1 + 1, c2 - c1 - 1)));
    if (o < 0 || o >= alphabet)
      throw BadConfig("config: observation id out of range in " + path);
    auto [it, inserted] = rows.emplace(seq, default_probs);
    it->second[o] = std::stod(line.substr(c2 + 1));
  }
  return rows;
}

}  // namespace configdetail

struct Instance {
  TargetSpec spec;
  std::uint64_t seed = 0;             // global run seed
  std::uint64_t enum_guard = kDefaultEnumGuard;
};

inline SeqModelPtr build_model(const Config& cfg, std::uint64_t global_seed,
                               int horizon_override = 0) {
  std::string kind = cfg.get("model.kind", "iid");
  int V = static_cast<int>(cfg.get_int("model.V", 2));
  int T = horizon_override > 0
              ? horizon_override
              : static_cast<int>(cfg.get_int("model.T", 2));
  std::uint64_t seed = cfg.get_u64("model.seed", global_seed);
  double conc = cfg.get_double("model.concentration", 1.0);
  if (kind == "iid") {
    if (cfg.has("model.probs"))
      return SeqModel::make_iid(cfg.get_double_list("model.probs", ""), T);
    return SeqModel::make_random(V, T, ModelKind::iid, seed, conc);
  }
  if (kind == "markov1") {
    if (cfg.has("model.init")) {
      auto init = cfg.get_double_list("model.init", "");
      std::vector<std::vector<double>> rows;
      for (std::size_t i = 0; i < init.size(); ++i) {
        std::string key = "model.row" + std::to_string(i);
        rows.push_back(cfg.get_double_list(key, cfg.require(key)));
      }
      return SeqModel::make_markov1(init, rows, T);
    }
    return SeqModel::make_random(V, T, ModelKind::markov1, seed, conc);
  }
  if (kind == "full_context")
    return SeqModel::make_random(V, T, ModelKind::full_context, seed, conc);
  throw BadConfig("config: unknown model.kind '" + kind + "'");
}

inline Instance build_instance(const Config& cfg) {
  Instance inst;
  inst.seed = cfg.get_u64(".seed", cfg.get_u64("run.seed", UINT64_MAX));
  if (inst.seed == UINT64_MAX)
    throw BadConfig("config: a global 'seed =' is mandatory");
  inst.enum_guard = cfg.get_u64("oracle.guard", kDefaultEnumGuard);
  inst.spec.model = build_model(cfg, inst.seed);
  const int T = inst.spec.model->horizon();

  std::string pot = cfg.get("target.potential", "unit");
  double table_default = cfg.get_double("target.table_default", 0.0);
  auto load_table = [&](double fallback_default) {
    if (cfg.has("target.table_csv"))
      return configdetail::load_seq_table_csv(cfg.require("target.table_csv"),
                                              fallback_default);
    SeqTable t;
    t.default_value = fallback_default;
    return t;
  };
  if (pot == "unit") {
    inst.spec.potential = Potential::unit();
  } else if (pot == "indicator_threshold") {
    inst.spec.potential = Potential::indicator_threshold(
        load_table(table_default), cfg.get_double("target.eta", 0.0),
        cfg.get_double("target.eps", 1e-16));
  } else if (pot == "exp_reward") {
    inst.spec.potential = Potential::exp_reward(
        load_table(table_default), cfg.get_double("target.beta", 1.0));
  } else if (pot == "classifier_prob") {
    inst.spec.potential = Potential::classifier_prob(
        load_table(cfg.get_double("target.table_default", 0.5)));
  } else if (pot == "tabular_terminal") {
    inst.spec.potential = Potential::tabular_terminal(
        load_table(cfg.get_double("target.table_default", 1.0)));
  } else if (pot == "continuation_likelihood") {
    Sequence cont =
        configdetail::parse_tokens(cfg.require("target.continuation"));
    auto ext = build_model(cfg, inst.seed, T + static_cast<int>(cont.size()));
    inst.spec.potential = Potential::continuation_likelihood(ext, cont);
  } else if (pot == "intermediate_product") {
    inst.spec.potential =
        Potential::intermediate_product(configdetail::load_step_tables_csv(
            cfg.require("target.step_table_csv"), T,
            cfg.get_double("target.table_default", 1.0)));
  } else {
    throw BadConfig("config: unknown target.potential '" + pot + "'");
  }

  std::string obs = cfg.get("target.observation", "none");
  if (obs == "continuation") {
    int c = static_cast<int>(cfg.get_int("target.c", 1));
    auto ext = build_model(cfg, inst.seed, T + c);
    inst.spec.observation = ObservationModel::continuation(ext, c);
    if (cfg.has("target.conditioning"))
      inst.spec.conditioning = Observation{
          configdetail::parse_tokens(cfg.require("target.conditioning"))};
  } else if (obs == "tabular") {
    int alphabet = static_cast<int>(cfg.get_int("target.obs_alphabet", 2));
    std::vector<double> defaults = cfg.get_double_list("target.obs_default", "");
    if (defaults.empty()) defaults.assign(alphabet, 1.0);
    std::unordered_map<Sequence, std::vector<double>, SequenceHash> rows;
    if (cfg.has("target.obs_csv"))
      rows = configdetail::load_obs_rows_csv(cfg.require("target.obs_csv"),
                                             alphabet, defaults);
    inst.spec.observation =
        ObservationModel::tabular(alphabet, defaults, std::move(rows));
    if (cfg.has("target.conditioning"))
      inst.spec.conditioning = Observation{
          static_cast<int>(cfg.get_int("target.conditioning", 0))};
  } else if (obs != "none") {
    throw BadConfig("config: unknown target.observation '" + obs + "'");
  }
  return inst;
}

inline std::uint64_t twist_obs_cardinality(const Instance& inst) {
  if (!inst.spec.observation.has_value()) return 0;
  return inst.spec.observation->cardinality(inst.spec.vocab());
}

// source = zero | random | oracle | checkpoint
inline TwistSet build_twists(const Config& cfg, const Instance& inst,
                             const OracleTable* oracle) {
  std::string kind = cfg.get("twist.kind", "tabular");
  std::string head_s = cfg.get("twist.head", "log");
  TwistHead head =
      head_s == "prob" ? TwistHead::prob_sigmoid : TwistHead::log_linear;
  std::string source = cfg.get("twist.source", "zero");
  bool with_root = cfg.get_bool("twist.root_value", false);
  if (source == "checkpoint")
    return load_checkpoint(cfg.require("twist.checkpoint"));
  if (source == "oracle") {
    if (!oracle)
      throw BadConfig("config: twist.source=oracle needs an oracle table");
    std::uint64_t card = twist_obs_cardinality(inst);
    return twists_from_oracle(*oracle, card, inst.spec.conditioning);
  }
  TwistSet tw = [&] {
    if (kind == "tabular")
      return TwistSet::tabular(inst.spec.vocab(), inst.spec.horizon(), head,
                               twist_obs_cardinality(inst), with_root);
    if (kind == "mlp") {
      std::uint64_t obs_dim = 0;
      if (inst.spec.observation.has_value()) {
        obs_dim =
            inst.spec.observation->kind() == ObservationKind::tabular_likelihood
                ? inst.spec.observation->alphabet()
                : static_cast<std::uint64_t>(
                      inst.spec.observation->continuation_len()) *
                      inst.spec.vocab();
      }
      return TwistSet::mlp(inst.spec.vocab(), inst.spec.horizon(),
                           static_cast<int>(cfg.get_int("twist.hidden", 32)),
                           static_cast<int>(cfg.get_int("twist.window", 0)),
                           head, obs_dim, with_root);
    }
    throw BadConfig("config: unknown twist.kind '" + kind + "'");
  }();
  if (source == "random")
    tw.randomize(cfg.get_u64("twist.init_seed", inst.seed ^ 0x7715),
                 cfg.get_double("twist.init_scale", 0.1));
  else if (source != "zero")
    throw BadConfig("config: unknown twist.source '" + source + "'");
  return tw;
}

inline learn::LossConfig build_loss_config(const Config& cfg,
                                           const Instance& inst) {
  learn::LossConfig lc;
  std::string kind = cfg.get("loss.kind", "ctl");
  if (kind == "ctl") lc.loss = learn::LossKind::ctl;
  else if (kind == "rl") lc.loss = learn::LossKind::rl;
  else if (kind == "softq") lc.loss = learn::LossKind::softq;
  else if (kind == "sixo") lc.loss = learn::LossKind::sixo;
  else if (kind == "fudge") lc.loss = learn::LossKind::fudge;
  else if (kind == "cdq") lc.loss = learn::LossKind::cdq;
  else if (kind == "cdfudge") lc.loss = learn::LossKind::cdfudge;
  else if (kind == "pcl1") lc.loss = learn::LossKind::pcl1;
  else if (kind == "dpg") lc.loss = learn::LossKind::dpg;
  else throw BadConfig("config: unknown loss.kind '" + kind + "'");

  std::string pos = cfg.get("loss.positive_source", "approximate_sis");
  if (pos == "exact_oracle") lc.positive_source = learn::PositiveSource::exact_oracle;
  else if (pos == "exact_rejection") lc.positive_source = learn::PositiveSource::exact_rejection;
  else if (pos == "exact_bdmc") lc.positive_source = learn::PositiveSource::exact_bdmc;
  else if (pos == "approximate_sis") lc.positive_source = learn::PositiveSource::approximate_sis;
  else if (pos == "approximate_smc") lc.positive_source = learn::PositiveSource::approximate_smc;
  else throw BadConfig("config: unknown loss.positive_source '" + pos + "'");

  std::string neg = cfg.get("loss.negative_proposal", "twist_induced");
  if (neg == "base") lc.negative_proposal = learn::NegativeProposal::base;
  else if (neg == "twist_induced") lc.negative_proposal = learn::NegativeProposal::twist_induced;
  else throw BadConfig("config: unknown loss.negative_proposal '" + neg + "'");

  lc.batch = static_cast<int>(cfg.get_int("loss.batch", 64));
  bool mlp = cfg.get("twist.kind", "tabular") == "mlp";
  lc.learning_rate = cfg.get_double("loss.learning_rate", mlp ? 1e-4 : 1e-3);
  lc.steps = static_cast<int>(cfg.get_int("loss.steps", 1000));
  lc.seed = cfg.get_u64("loss.seed", inst.seed);
  std::string opt = cfg.get("loss.optimizer", "adam");
  if (opt == "adam") lc.adam = true;
  else if (opt == "sgd") lc.adam = false;
  else throw BadConfig("config: unknown loss.optimizer '" + opt + "'");
  lc.adam_beta1 = cfg.get_double("loss.adam_beta1", 0.9);
  lc.adam_beta2 = cfg.get_double("loss.adam_beta2", 0.999);
  lc.log_every = static_cast<int>(cfg.get_int("loss.log_every", 100));
  lc.rejection_budget =
      static_cast<int>(cfg.get_int("engine.rejection_budget", 1'000'000));
  return lc;
}

inline ResampleSchedule build_schedule(const Config& cfg) {
  std::string s = cfg.get("engine.schedule", "every_step");
  if (s == "never") return ResampleSchedule::never();
  if (s == "every_step") return ResampleSchedule::every_step();
  if (s.rfind("ess", 0) == 0) {
    double frac = 0.5;
    if (s.size() > 4 && s[3] == ':') frac = std::stod(s.substr(4));
    return ResampleSchedule::ess(frac);
  }
  if (s.rfind("at:", 0) == 0) {
    std::vector<int> ts;
    std::istringstream in(s.substr(3));
    std::string item;
    while (std::getline(in, item, ',')) ts.push_back(std::stoi(item));
    return ResampleSchedule::at(std::move(ts));
  }
  throw BadConfig("config: unknown engine.schedule '" + s + "'");
}

}  // namespace twistsmc
