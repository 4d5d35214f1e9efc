#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "twistsmc/errors.hpp"
#include "twistsmc/twist.hpp"

namespace twistsmc {

// Checkpoint layout: one ASCII header line
//   twistsmc-ckpt-v1 kind head V T window hidden obs_card obs_dim n_params
// followed by n_params little-endian IEEE doubles in the canonical parameter
// order documented in twist.hpp. Writes go through a temp file + rename.
inline void save_checkpoint(const std::string& path, const TwistSet& tw) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw BadInput("save_checkpoint: cannot open " + tmp);
    out << "twistsmc-ckpt-v1 "
        << (tw.kind() == TwistKind::tabular ? "tabular" : "mlp") << ' '
        << (tw.head() == TwistHead::log_linear ? "log" : "prob") << ' '
        << tw.vocab() << ' ' << tw.horizon() << ' ' << tw.window() << ' '
        << tw.hidden() << ' ' << tw.obs_cardinality() << ' ' << tw.obs_dim()
        << ' ' << (tw.has_root_value() ? 1 : 0) << ' ' << tw.param_count()
        << '\n';
    out.write(reinterpret_cast<const char*>(tw.params().data()),
              static_cast<std::streamsize>(tw.param_count() * sizeof(double)));
    if (!out) throw BadInput("save_checkpoint: write failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw BadInput("save_checkpoint: rename failed");
}

inline TwistSet load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw BadInput("load_checkpoint: cannot open " + path);
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  std::string magic, kind, head;
  int vocab = 0, horizon = 0, window = 0, hidden = 0, root = 0;
  std::uint64_t obs_card = 0, obs_dim = 0, n = 0;
  hs >> magic >> kind >> head >> vocab >> horizon >> window >> hidden >>
      obs_card >> obs_dim >> root >> n;
  if (!hs || magic != "twistsmc-ckpt-v1")
    throw BadInput("load_checkpoint: bad header in " + path);
  TwistHead h =
      head == "prob" ? TwistHead::prob_sigmoid : TwistHead::log_linear;
  TwistSet tw =
      kind == "tabular"
          ? TwistSet::tabular(vocab, horizon, h, obs_card, root != 0)
          : TwistSet::mlp(vocab, horizon, hidden, window, h, obs_dim,
                          root != 0);
  if (tw.param_count() != n)
    throw BadInput("load_checkpoint: parameter count mismatch");
  in.read(reinterpret_cast<char*>(tw.params().data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw BadInput("load_checkpoint: truncated parameter block");
  return tw;
}

}  // namespace twistsmc
