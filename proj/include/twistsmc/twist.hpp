#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "twistsmc/errors.hpp"
#include "twistsmc/logspace.hpp"
#include "twistsmc/oracle.hpp"
#include "twistsmc/targets.hpp"

namespace twistsmc {

enum class TwistKind { tabular, mlp };

// log_linear: the raw score is log psi directly (unconstrained).
// prob_sigmoid: psi = sigmoid(raw), for losses that need psi in (0, 1).
enum class TwistHead { log_linear, prob_sigmoid };

struct MlpLayout {
  int input_dim = 0;
  int hidden = 32;
  // offsets into the flat parameter vector, canonical order
  // W1 (hidden x input, row-major), b1, W2 (hidden x hidden), b2, w3, b3
  std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0, w3 = 0, b3 = 0, total = 0;
};

/**
 * Twist functions psi_t(s_{1:t}[, o]) parameterized in log space, either as a
 * dense table over (t, prefix[, o]) cells or as a 2-hidden-layer tanh network
 * over a fixed featurization (one-hot of the last min(t, W) tokens, one-hot of
 * t, one-hot of the observation). Zero parameters give log psi == 0 under the
 * log_linear head, so the induced proposal starts at the base model.
 *
 * Parameter order is canonical and documented here: tabular cells are laid
 * out level-major (t = 1..T), rank-major within a level, observation-major
 * within a rank; the mlp uses the MlpLayout order above.
 */
class TwistSet {
 public:
  static TwistSet tabular(int vocab, int horizon,
                          TwistHead head = TwistHead::log_linear,
                          std::uint64_t obs_cardinality = 0,
                          bool with_root_value = false,
                          std::uint64_t cell_guard = 8'000'000) {
    TwistSet tw;
    tw.kind_ = TwistKind::tabular;
    tw.head_ = head;
    tw.vocab_ = vocab;
    tw.horizon_ = horizon;
    tw.obs_card_ = obs_cardinality;
    tw.with_root_ = with_root_value;
    std::uint64_t per_obs = obs_cardinality == 0 ? 1 : obs_cardinality;
    std::uint64_t cells = 0;
    tw.level_offset_.resize(horizon + 1, 0);
    for (int t = 1; t <= horizon; ++t) {
      tw.level_offset_[t - 1] = cells;
      cells += ipow_u64(vocab, t) * per_obs;
      if (cells > cell_guard)
        throw TooLarge("tabular twist: cell count exceeds guard");
    }
    tw.level_offset_[horizon] = cells;
    tw.params_.assign(cells + (with_root_value ? 1 : 0), 0.0);
    return tw;
  }

  static TwistSet mlp(int vocab, int horizon, int hidden, int window,
                      TwistHead head = TwistHead::log_linear,
                      std::uint64_t obs_dim = 0,
                      bool with_root_value = false) {
    if (hidden < 1) throw BadConfig("mlp twist: hidden must be >= 1");
    if (window < 1 || window > horizon) window = horizon;
    TwistSet tw;
    tw.kind_ = TwistKind::mlp;
    tw.head_ = head;
    tw.vocab_ = vocab;
    tw.horizon_ = horizon;
    tw.window_ = window;
    tw.obs_dim_ = obs_dim;
    MlpLayout& l = tw.layout_;
    l.input_dim = window * vocab + horizon + static_cast<int>(obs_dim);
    l.hidden = hidden;
    std::size_t off = 0;
    l.w1 = off; off += static_cast<std::size_t>(hidden) * l.input_dim;
    l.b1 = off; off += hidden;
    l.w2 = off; off += static_cast<std::size_t>(hidden) * hidden;
    l.b2 = off; off += hidden;
    l.w3 = off; off += hidden;
    l.b3 = off; off += 1;
    l.total = off;
    tw.with_root_ = with_root_value;
    tw.params_.assign(off + (with_root_value ? 1 : 0), 0.0);
    return tw;
  }

  // Xavier-style normal init; biases stay zero
  void randomize(std::uint64_t seed, double scale = 1.0) {
    RngStream rng = RngStream::from_seed(seed);
    if (kind_ == TwistKind::tabular) {
      for (auto& p : params_) p = scale * rng.normal();
      return;
    }
    auto fill = [&](std::size_t off, std::size_t n, int fan_in, int fan_out) {
      double sd = std::sqrt(2.0 / (fan_in + fan_out));
      for (std::size_t i = 0; i < n; ++i)
        params_[off + i] = scale * sd * rng.normal();
    };
    const MlpLayout& l = layout_;
    fill(l.w1, static_cast<std::size_t>(l.hidden) * l.input_dim, l.input_dim,
         l.hidden);
    fill(l.w2, static_cast<std::size_t>(l.hidden) * l.hidden, l.hidden,
         l.hidden);
    fill(l.w3, l.hidden, l.hidden, 1);
  }

  TwistKind kind() const { return kind_; }
  TwistHead head() const { return head_; }
  int vocab() const { return vocab_; }
  int horizon() const { return horizon_; }
  int window() const { return window_; }
  int hidden() const { return layout_.hidden; }
  std::uint64_t obs_cardinality() const { return obs_card_; }
  std::uint64_t obs_dim() const { return obs_dim_; }
  bool conditional() const {
    return kind_ == TwistKind::tabular ? obs_card_ > 0 : obs_dim_ > 0;
  }
  // optional trailing cell addressed as t = 0 with the empty prefix; PCL's
  // empty-prefix value (whose optimum is log Z)
  bool has_root_value() const { return with_root_; }
  void set_root_log(double v) {
    if (!with_root_) throw Unsupported("set_root_log: no root-value cell");
    params_.back() = v;
  }

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  std::size_t param_count() const { return params_.size(); }

  double log_twist(int t, const Sequence& prefix,
                   const std::optional<Observation>& o = std::nullopt) const {
    double raw = raw_score(t, prefix, o, nullptr, 0.0);
    return head_ == TwistHead::log_linear ? raw : log_sigmoid(raw);
  }

  // grad += coeff * d log psi / d theta
  double add_grad_log_twist(int t, const Sequence& prefix,
                            const std::optional<Observation>& o, double coeff,
                            std::span<double> grad) const {
    if (head_ == TwistHead::log_linear) {
      double raw = raw_score(t, prefix, o, grad.data(), coeff);
      return raw;
    }
    // d log sigmoid(raw) / d raw = 1 - sigmoid(raw)
    double raw = raw_score(t, prefix, o, nullptr, 0.0);
    double dv = 1.0 - sigmoid(raw);
    raw_score(t, prefix, o, grad.data(), coeff * dv);
    return log_sigmoid(raw);
  }

  std::pair<double, std::vector<double>> log_twist_with_grad(
      int t, const Sequence& prefix,
      const std::optional<Observation>& o = std::nullopt) const {
    std::vector<double> grad(params_.size(), 0.0);
    double v = add_grad_log_twist(t, prefix, o, 1.0, grad);
    return {v, std::move(grad)};
  }

  // tabular only: pin a cell's log value (log_linear head)
  void set_tabular_log(int t, const Sequence& prefix, double log_psi,
                       const std::optional<Observation>& o = std::nullopt) {
    if (kind_ != TwistKind::tabular || head_ != TwistHead::log_linear)
      throw Unsupported("set_tabular_log: needs tabular log-head twists");
    params_[cell_index(t, prefix, o)] = log_psi;
  }

 private:
  static double sigmoid(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                    : std::exp(x) / (1.0 + std::exp(x));
  }
  static double log_sigmoid(double x) {
    return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
  }

  std::uint64_t obs_index(const std::optional<Observation>& o) const {
    if (obs_card_ == 0) return 0;
    if (!o.has_value())
      throw MissingObservation("conditional twist queried without observation");
    if (const int* id = std::get_if<int>(&*o))
      return static_cast<std::uint64_t>(*id);
    return prefix_rank(std::get<Sequence>(*o), vocab_);
  }

  std::size_t cell_index(int t, const Sequence& prefix,
                         const std::optional<Observation>& o) const {
    if (t < 1 || t > horizon_ || static_cast<int>(prefix.size()) != t)
      throw BadStep("twist: prefix length must equal t in [1, T]");
    std::uint64_t per_obs = obs_card_ == 0 ? 1 : obs_card_;
    std::uint64_t idx = level_offset_[t - 1] +
                        prefix_rank(prefix, vocab_) * per_obs + obs_index(o);
    return static_cast<std::size_t>(idx);
  }

  // Returns the raw score; if grad_out != nullptr, accumulates
  // coeff * d raw / d theta into it.
  double raw_score(int t, const Sequence& prefix,
                   const std::optional<Observation>& o, double* grad_out,
                   double coeff) const {
    if (t == 0) {
      if (!with_root_ || !prefix.empty())
        throw BadStep("twist: t = 0 needs a root-value cell and empty prefix");
      if (grad_out) grad_out[params_.size() - 1] += coeff;
      return params_.back();
    }
    if (kind_ == TwistKind::tabular) {
      std::size_t idx = cell_index(t, prefix, o);
      if (grad_out) grad_out[idx] += coeff;
      return params_[idx];
    }
    return mlp_forward(t, prefix, o, grad_out, coeff);
  }

  std::vector<double> features(int t, const Sequence& prefix,
                               const std::optional<Observation>& o) const {
    if (t < 1 || t > horizon_ || static_cast<int>(prefix.size()) != t)
      throw BadStep("twist: prefix length must equal t in [1, T]");
    std::vector<double> x(layout_.input_dim, 0.0);
    int w = std::min(t, window_);
    for (int j = 0; j < w; ++j) {
      Token tok = prefix[t - w + j];
      x[(window_ - w + j) * vocab_ + tok] = 1.0;
    }
    x[window_ * vocab_ + (t - 1)] = 1.0;
    if (obs_dim_ > 0) {
      if (!o.has_value())
        throw MissingObservation("conditional mlp twist needs an observation");
      std::size_t base = static_cast<std::size_t>(window_) * vocab_ + horizon_;
      if (const int* id = std::get_if<int>(&*o)) {
        if (*id < 0 || static_cast<std::uint64_t>(*id) >= obs_dim_)
          throw BadInput("twist: observation id out of range");
        x[base + *id] = 1.0;
      } else {
        const Sequence& cont = std::get<Sequence>(*o);
        if (cont.size() * vocab_ > obs_dim_)
          throw BadInput("twist: observation continuation too long");
        for (std::size_t j = 0; j < cont.size(); ++j)
          x[base + j * vocab_ + cont[j]] = 1.0;
      }
    }
    return x;
  }

  double mlp_forward(int t, const Sequence& prefix,
                     const std::optional<Observation>& o, double* grad_out,
                     double coeff) const {
    const MlpLayout& l = layout_;
    std::vector<double> x = features(t, prefix, o);
    std::vector<double> h1(l.hidden), h2(l.hidden), a1(l.hidden), a2(l.hidden);
    for (int i = 0; i < l.hidden; ++i) {
      double acc = params_[l.b1 + i];
      const double* w = &params_[l.w1 + static_cast<std::size_t>(i) * l.input_dim];
      for (int j = 0; j < l.input_dim; ++j) acc += w[j] * x[j];
      a1[i] = acc;
      h1[i] = std::tanh(acc);
    }
    for (int i = 0; i < l.hidden; ++i) {
      double acc = params_[l.b2 + i];
      const double* w = &params_[l.w2 + static_cast<std::size_t>(i) * l.hidden];
      for (int j = 0; j < l.hidden; ++j) acc += w[j] * h1[j];
      a2[i] = acc;
      h2[i] = std::tanh(acc);
    }
    double raw = params_[l.b3];
    for (int i = 0; i < l.hidden; ++i) raw += params_[l.w3 + i] * h2[i];
    if (!grad_out) return raw;

    // reverse pass
    grad_out[l.b3] += coeff;
    std::vector<double> d2(l.hidden);
    for (int i = 0; i < l.hidden; ++i) {
      grad_out[l.w3 + i] += coeff * h2[i];
      d2[i] = coeff * params_[l.w3 + i] * (1.0 - h2[i] * h2[i]);
    }
    std::vector<double> d1(l.hidden, 0.0);
    for (int i = 0; i < l.hidden; ++i) {
      grad_out[l.b2 + i] += d2[i];
      for (int j = 0; j < l.hidden; ++j) {
        grad_out[l.w2 + static_cast<std::size_t>(i) * l.hidden + j] +=
            d2[i] * h1[j];
        d1[j] += d2[i] * params_[l.w2 + static_cast<std::size_t>(i) * l.hidden + j];
      }
    }
    for (int i = 0; i < l.hidden; ++i) {
      double di = d1[i] * (1.0 - h1[i] * h1[i]);
      grad_out[l.b1 + i] += di;
      for (int j = 0; j < l.input_dim; ++j)
        grad_out[l.w1 + static_cast<std::size_t>(i) * l.input_dim + j] +=
            di * x[j];
    }
    return raw;
  }

  TwistKind kind_ = TwistKind::tabular;
  TwistHead head_ = TwistHead::log_linear;
  int vocab_ = 0;
  int horizon_ = 0;
  int window_ = 0;
  std::uint64_t obs_card_ = 0;  // tabular conditioning cardinality
  std::uint64_t obs_dim_ = 0;   // mlp observation feature width
  bool with_root_ = false;
  std::vector<std::uint64_t> level_offset_;
  MlpLayout layout_;
  std::vector<double> params_;
};

// Loads the oracle's canonical optimal twists into a dense tabular set
// (optionally into the cells of one conditioning value).
inline TwistSet twists_from_oracle(const OracleTable& table,
                                   std::uint64_t obs_cardinality = 0,
                                   const std::optional<Observation>& o =
                                       std::nullopt) {
  TwistSet tw = TwistSet::tabular(table.vocab, table.horizon,
                                  TwistHead::log_linear, obs_cardinality);
  for (int t = 1; t <= table.horizon; ++t) {
    const auto& level = table.log_psi[t - 1];
    for (std::uint64_t r = 0; r < level.size(); ++r) {
      double v = level[r];
      if (v == kNegInf) v = -745.0;  // log(double-min) floor keeps cells finite
      tw.set_tabular_log(t, prefix_from_rank(r, t, table.vocab), v, o);
    }
  }
  return tw;
}

enum class FinalStepMode { exact_phi, learned_psi };

// q_t(s | s_{1:t-1}) proportional to p0(s | s_{1:t-1}) psi_t(s_{1:t}); the
// final step uses the exact potential by default, or learned psi_T for
// potential kinds flagged expensive (the weight then carries phi/psi_T).
inline std::vector<double> twist_induced_proposal_logprobs(
    const TwistSet& tw, const TargetSpec& spec, int t, const Sequence& prefix,
    FinalStepMode final_mode = FinalStepMode::exact_phi,
    const std::vector<double>* p0_row = nullptr) {
  const int T = spec.horizon();
  if (static_cast<int>(prefix.size()) != t - 1 || t < 1 || t > T)
    throw BadStep("twist proposal: prefix length must be t-1 < T");
  std::vector<double> logits =
      p0_row ? *p0_row : spec.model->next_token_logprobs(prefix);
  Sequence child = prefix;
  child.push_back(0);
  for (int s = 0; s < spec.vocab(); ++s) {
    child.back() = static_cast<Token>(s);
    if (t == T && final_mode == FinalStepMode::exact_phi)
      logits[s] += spec.log_potential(child, T);
    else
      logits[s] += tw.log_twist(t, child, spec.conditioning);
  }
  return log_softmax(logits);
}

}  // namespace twistsmc
