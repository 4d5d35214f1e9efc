#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "twistsmc/errors.hpp"
#include "twistsmc/logspace.hpp"
#include "twistsmc/rng.hpp"

namespace twistsmc {

using Token = std::int32_t;
using Sequence = std::vector<Token>;

struct SequenceHash {
  std::size_t operator()(const Sequence& s) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (Token t : s) {
      h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(t));
      h *= 0x100000001b3ULL;
    }
    return static_cast<std::size_t>(h);
  }
};

inline std::uint64_t ipow_u64(std::uint64_t base, int exp) {
  std::uint64_t r = 1;
  for (int i = 0; i < exp; ++i) r *= base;
  return r;
}

// Big-endian rank of a length-t prefix in [0, V^t); children of rank r are
// r*V + s.
inline std::uint64_t prefix_rank(std::span<const Token> prefix, int vocab) {
  std::uint64_t r = 0;
  for (Token s : prefix) r = r * static_cast<std::uint64_t>(vocab) + s;
  return r;
}

inline Sequence prefix_from_rank(std::uint64_t rank, int len, int vocab) {
  Sequence out(len);
  for (int i = len - 1; i >= 0; --i) {
    out[i] = static_cast<Token>(rank % vocab);
    rank /= vocab;
  }
  return out;
}

enum class ModelKind { iid, markov1, full_context };

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::iid: return "iid";
    case ModelKind::markov1: return "markov1";
    case ModelKind::full_context: return "full_context";
  }
  return "?";
}

/**
 * Finite-vocabulary autoregressive model over fixed-length sequences, stored
 * as log-probability tables. full_context rows are materialized lazily from
 * (seed, prefix) and cached; two fills of the same key produce identical rows,
 * so concurrent fill-on-miss is safe.
 */
class SeqModel {
 public:
  static std::shared_ptr<const SeqModel> make_iid(std::vector<double> probs,
                                                  int horizon) {
    auto m = std::shared_ptr<SeqModel>(new SeqModel(
        ModelKind::iid, static_cast<int>(probs.size()), horizon));
    m->iid_row_ = to_normalized_log(probs);
    return m;
  }

  static std::shared_ptr<const SeqModel> make_markov1(
      std::vector<double> init, std::vector<std::vector<double>> rows,
      int horizon) {
    auto m = std::shared_ptr<SeqModel>(new SeqModel(
        ModelKind::markov1, static_cast<int>(init.size()), horizon));
    if (rows.size() != init.size())
      throw BadConfig("markov1: need one transition row per token");
    m->markov_init_ = to_normalized_log(init);
    for (auto& r : rows) {
      if (r.size() != init.size())
        throw BadConfig("markov1: transition row has wrong width");
      m->markov_rows_.push_back(to_normalized_log(r));
    }
    return m;
  }

  static std::shared_ptr<const SeqModel> make_random(int vocab, int horizon,
                                                     ModelKind kind,
                                                     std::uint64_t seed,
                                                     double concentration) {
    if (vocab < 2 || horizon < 1)
      throw BadConfig("random model: need V >= 2 and T >= 1");
    if (!(concentration > 0.0))
      throw BadConfig("random model: concentration must be positive");
    auto m = std::shared_ptr<SeqModel>(new SeqModel(kind, vocab, horizon));
    m->seed_ = seed;
    m->concentration_ = concentration;
    RngStream root = RngStream::from_seed(seed);
    switch (kind) {
      case ModelKind::iid: {
        RngStream s = root.substream(0);
        m->iid_row_ = dirichlet_log_row(vocab, concentration, s);
        break;
      }
      case ModelKind::markov1: {
        RngStream s = root.substream(0);
        m->markov_init_ = dirichlet_log_row(vocab, concentration, s);
        for (int i = 0; i < vocab; ++i) {
          RngStream r = root.substream(1, static_cast<std::uint64_t>(i));
          m->markov_rows_.push_back(dirichlet_log_row(vocab, concentration, r));
        }
        break;
      }
      case ModelKind::full_context:
        // rows generated on demand, keyed by (seed, prefix)
        break;
    }
    return m;
  }

  int vocab() const { return vocab_; }
  int horizon() const { return horizon_; }
  ModelKind kind() const { return kind_; }
  std::uint64_t seed() const { return seed_; }
  double concentration() const { return concentration_; }

  std::vector<double> next_token_logprobs(const Sequence& prefix) const {
    if (static_cast<int>(prefix.size()) >= horizon_)
      throw HorizonExceeded("next_token_logprobs: prefix length must be < T");
    check_tokens(prefix);
    return row(prefix);
  }

  // Chain rule over the same per-step rows used by next_token_logprobs.
  double sequence_logprob(const Sequence& seq) const {
    if (static_cast<int>(seq.size()) > horizon_)
      throw HorizonExceeded("sequence_logprob: sequence longer than T");
    check_tokens(seq);
    double lp = 0.0;
    Sequence prefix;
    prefix.reserve(seq.size());
    for (Token s : seq) {
      lp += row(prefix)[s];
      prefix.push_back(s);
    }
    return lp;
  }

  Sequence sample_sequence(RngStream& rng, int len) const {
    if (len > horizon_)
      throw HorizonExceeded("sample_sequence: length exceeds T");
    Sequence seq;
    seq.reserve(len);
    for (int t = 0; t < len; ++t) {
      auto lp = row(seq);
      seq.push_back(static_cast<Token>(sample_categorical_logits(lp, rng)));
    }
    return seq;
  }

 private:
  SeqModel(ModelKind kind, int vocab, int horizon)
      : kind_(kind), vocab_(vocab), horizon_(horizon),
        cache_(std::make_unique<Cache>()) {
    if (vocab_ < 1 || horizon_ < 1)
      throw BadConfig("SeqModel: need V >= 1 and T >= 1");
  }

  struct Cache {
    std::mutex mutex;
    std::unordered_map<std::uint64_t, std::vector<double>> rows;
  };

  static std::vector<double> to_normalized_log(
      const std::vector<double>& probs) {
    if (probs.empty()) throw BadConfig("probability row is empty");
    double sum = 0.0;
    for (double p : probs) {
      if (p < 0.0) throw BadConfig("probability entries must be nonnegative");
      sum += p;
    }
    if (!(sum > 0.0)) throw BadConfig("probability row sums to zero");
    std::vector<double> out(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i)
      out[i] = std::log(probs[i] / sum);
    return out;
  }

  static std::vector<double> dirichlet_log_row(int vocab, double conc,
                                               RngStream& rng) {
    // symmetric Dirichlet; concentration -> inf gives near-uniform rows
    std::vector<double> g(vocab);
    double sum = 0.0;
    for (int i = 0; i < vocab; ++i) {
      g[i] = rng.gamma(conc);
      sum += g[i];
    }
    std::vector<double> out(vocab);
    for (int i = 0; i < vocab; ++i) out[i] = std::log(g[i] / sum);
    return out;
  }

  void check_tokens(const Sequence& seq) const {
    for (Token s : seq)
      if (s < 0 || s >= vocab_)
        throw BadInput("token id out of range");
  }

  std::vector<double> row(const Sequence& prefix) const {
    switch (kind_) {
      case ModelKind::iid:
        return iid_row_;
      case ModelKind::markov1:
        return prefix.empty() ? markov_init_ : markov_rows_[prefix.back()];
      case ModelKind::full_context: {
        std::uint64_t key = context_key(prefix);
        {
          std::lock_guard<std::mutex> lock(cache_->mutex);
          auto it = cache_->rows.find(key);
          if (it != cache_->rows.end()) return it->second;
        }
        RngStream s = RngStream::from_seed(seed_).substream(2, key);
        auto fresh = dirichlet_log_row(vocab_, concentration_, s);
        std::lock_guard<std::mutex> lock(cache_->mutex);
        auto [it, inserted] = cache_->rows.emplace(key, std::move(fresh));
        return it->second;
      }
    }
    throw Error("unreachable model kind");
  }

  std::uint64_t context_key(const Sequence& prefix) const {
    std::uint64_t h = 0x9e3779b97f4a7c15ULL ^ prefix.size();
    for (Token t : prefix) {
      h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(t)) +
           0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    }
    return h;
  }

  ModelKind kind_;
  int vocab_;
  int horizon_;
  std::uint64_t seed_ = 0;
  double concentration_ = 1.0;
  std::vector<double> iid_row_;
  std::vector<double> markov_init_;
  std::vector<std::vector<double>> markov_rows_;
  mutable std::unique_ptr<Cache> cache_;
};

using SeqModelPtr = std::shared_ptr<const SeqModel>;

}  // namespace twistsmc
