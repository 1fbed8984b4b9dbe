#pragma once

#include <cmath>
#include <deque>
#include <vector>

#include "memscan/ops.hpp"
#include "memscan/scan.hpp"
#include "memscan/tensor.hpp"

namespace memscan {

// Fixed-capacity FIFO of historical chunk features: pushing beyond capacity
// evicts the oldest entry. Entries are ordered oldest first.
template <typename Elem>
class MemoryBank {
 public:
  explicit MemoryBank(int capacity) : capacity_(capacity) {
    if (capacity < 1) throw ConfigError("MemoryBank: capacity must be >= 1");
  }

  void push(Elem e) {
    entries_.push_back(std::move(e));
    if (static_cast<int>(entries_.size()) > capacity_) entries_.pop_front();
  }

  const std::deque<Elem>& entries() const { return entries_; }
  int capacity() const { return capacity_; }
  int size() const { return static_cast<int>(entries_.size()); }

 private:
  int capacity_;
  std::deque<Elem> entries_;
};

// Push with a shape guard against the entries already stored.
template <typename T>
void bank_update(MemoryBank<Tensor<T>>& bank, Tensor<T> entry) {
  if (bank.size() > 0 && !(bank.entries().front().shape() == entry.shape()))
    throw ConfigError("bank_update: entry shape " + entry.shape().str() +
                      " does not match stored " + bank.entries().front().shape().str());
  bank.push(std::move(entry));
}

// ---- channel chunking ----

template <typename T>
std::vector<Var> chunk_split(Tape<T>& t, Var f, int n) {
  const Tensor<T>& fv = t.val(f);
  if (fv.shape().ndim() != 3) throw ConfigError("chunk_split: need {C,H,W}");
  int c = fv.shape()[0];
  if (n < 1 || c % n != 0)
    throw ConfigError("chunk_split: channel count " + std::to_string(c) +
                      " not divisible by " + std::to_string(n));
  std::vector<Var> out;
  int step = c / n;
  for (int i = 0; i < n; ++i) out.push_back(slice_chan(t, f, i * step, step));
  return out;
}

template <typename T>
std::vector<Tensor<T>> chunk_split(const Tensor<T>& f, int n) {
  Tape<T> t;
  std::vector<Var> vs = chunk_split(t, t.input(f), n);
  std::vector<Tensor<T>> out;
  for (Var v : vs) out.push_back(t.val(v));
  return out;
}

// ---- cross-chunk attention fusion ----

// Weights for fusing a chunk with bank history: a shared channel norm, four
// width-preserving 1x1 projections, and a logit temperature. Each projected
// map serves once as a query and once as a key across the two attention
// directions; values come from the unnormalized features.
struct FuseVars {
  Var gamma, beta;          // norm applied to both fusion inputs
  Var qk_cur_w, qk_cur_b;   // projection of the normalized current chunk
  Var qk_hist_w, qk_hist_b; // projection of a normalized history entry
  Var v_cur_w, v_cur_b;     // value projection of the raw current chunk
  Var v_hist_w, v_hist_b;   // value projection of a raw history entry
  double temperature = 1.0;
};

template <typename T>
struct FuseInit {
  Tensor<T> gamma, beta;
  Tensor<T> qk_cur_w, qk_cur_b, qk_hist_w, qk_hist_b;
  Tensor<T> v_cur_w, v_cur_b, v_hist_w, v_hist_b;
  double temperature = 1.0;

  static FuseInit make(int c, Rng& rng) {
    if (c < 1) throw ConfigError("FuseInit: need positive width");
    FuseInit f;
    f.gamma = Tensor<T>::full({c}, T(1));
    f.beta = Tensor<T>({c});
    double bound = 1.0 / std::sqrt(double(c));
    auto proj = [&](Tensor<T>& w, Tensor<T>& b) {
      w = rng.uniform_tensor<T>({c, c}, -bound, bound);
      b = Tensor<T>({c});
    };
    proj(f.qk_cur_w, f.qk_cur_b);
    proj(f.qk_hist_w, f.qk_hist_b);
    proj(f.v_cur_w, f.v_cur_b);
    proj(f.v_hist_w, f.v_hist_b);
    return f;
  }
};

template <typename T>
FuseVars bind_fuse(Tape<T>& t, const FuseInit<T>& f, bool trainable) {
  FuseVars v;
  v.gamma = t.input(f.gamma, trainable);
  v.beta = t.input(f.beta, trainable);
  v.qk_cur_w = t.input(f.qk_cur_w, trainable);
  v.qk_cur_b = t.input(f.qk_cur_b, trainable);
  v.qk_hist_w = t.input(f.qk_hist_w, trainable);
  v.qk_hist_b = t.input(f.qk_hist_b, trainable);
  v.v_cur_w = t.input(f.v_cur_w, trainable);
  v.v_cur_b = t.input(f.v_cur_b, trainable);
  v.v_hist_w = t.input(f.v_hist_w, trainable);
  v.v_hist_b = t.input(f.v_hist_b, trainable);
  v.temperature = f.temperature;
  return v;
}

// Fuses the current chunk with every bank entry, oldest first. Per entry E:
// channel-attention logits (c x c) are built from flattened c x (HW)
// features, scaled by temperature/sqrt(HW), softmaxed over the last axis;
// the current->history direction reads E's values, the reverse direction
// reads the current chunk's values. Output adds the current chunk once plus,
// per entry, both attention reads and the raw entry. Empty history returns
// the chunk unchanged.
template <typename T>
Var cross_fuse(Tape<T>& t, Var cur, const std::vector<Var>& history, const FuseVars& w) {
  if (history.empty()) return cur;
  // Copy the shape: later pushes may reallocate tape storage, so references
  // obtained from t.val() must not be held across graph construction.
  const Shape cshape = t.val(cur).shape();
  if (cshape.ndim() != 3) throw ConfigError("cross_fuse: need {c,H,W}");
  int c = cshape[0], h = cshape[1], wd = cshape[2];
  for (Var e : history)
    if (!(t.val(e).shape() == cshape))
      throw ConfigError("cross_fuse: history entry shape " + t.val(e).shape().str() +
                        " does not match chunk " + cshape.str());
  std::int64_t hw = static_cast<std::int64_t>(h) * wd;
  T logit_scale = static_cast<T>(w.temperature / std::sqrt(double(hw)));
  Shape flat{c, static_cast<int>(hw)};

  Var a_flat = reshape(
      t, pointwise_conv(t, layer_norm_chan(t, cur, w.gamma, w.beta), w.qk_cur_w, w.qk_cur_b),
      flat);
  Var v_cur = reshape(t, pointwise_conv(t, cur, w.v_cur_w, w.v_cur_b), flat);

  Var acc = cur;
  for (Var entry : history) {
    Var b_flat = reshape(
        t,
        pointwise_conv(t, layer_norm_chan(t, entry, w.gamma, w.beta), w.qk_hist_w, w.qk_hist_b),
        flat);
    Var v_hist = reshape(t, pointwise_conv(t, entry, w.v_hist_w, w.v_hist_b), flat);
    Var att_fwd = matmul(t, softmax_rows(t, scale(t, matmul_nt(t, a_flat, b_flat), logit_scale)),
                         v_hist);
    Var att_bwd = matmul(t, softmax_rows(t, scale(t, matmul_nt(t, b_flat, a_flat), logit_scale)),
                         v_cur);
    Var pair = add(t, add(t, reshape(t, att_fwd, cshape), reshape(t, att_bwd, cshape)), entry);
    acc = add(t, acc, pair);
  }
  return acc;
}

// ---- chunked scan with a memory bank ----

// One chunk-processing weight set is shared across all chunks.
template <typename T>
struct BankedScanInit {
  MambaInit<T> mamba;
  FuseInit<T> fuse;

  static BankedScanInit make(int chunk_width, int state_dim, Rng& rng) {
    BankedScanInit b;
    b.mamba = MambaInit<T>::make(chunk_width, state_dim, rng);
    b.fuse = FuseInit<T>::make(chunk_width, rng);
    return b;
  }
};

struct BankedScanVars {
  MambaVars mamba;
  FuseVars fuse;
};

template <typename T>
BankedScanVars bind_banked(Tape<T>& t, const BankedScanInit<T>& b, bool trainable) {
  return {bind_mamba(t, b.mamba, trainable), bind_fuse(t, b.fuse, trainable)};
}

// Splits channels into `chunks` equal slices, runs the scanned block on each
// in order, fuses each result with the FIFO bank of previously fused chunks,
// pushes the fused result, and concatenates everything back. The bank starts
// empty on every call.
template <typename T>
Var banked_scan(Tape<T>& t, Var fmap, int chunks, int bank_depth, const BankedScanVars& w) {
  if (bank_depth < 1) throw ConfigError("banked_scan: bank depth must be >= 1");
  std::vector<Var> parts = chunk_split(t, fmap, chunks);
  MemoryBank<Var> bank(bank_depth);
  std::vector<Var> fused;
  for (Var part : parts) {
    Var m = mamba_block(t, part, w.mamba);
    std::vector<Var> history(bank.entries().begin(), bank.entries().end());
    Var f = cross_fuse(t, m, history, w.fuse);
    bank.push(f);
    fused.push_back(f);
  }
  if (fused.size() == 1) return fused[0];
  return concat_chan(t, fused);
}

// ---- decoder block ----

struct BlockConfig {
  int chunks = 4;
  int bank_depth = 1;
  int state_dim = 16;
  double ffn_expansion = 2.0;
};

// Gated two-layer pointwise feed-forward: expand to 2m channels, split,
// multiply one half by SiLU of the other, project back.
struct FfnVars {
  Var w1, b1;  // {2m, C}
  Var w2, b2;  // {C, m}
};

template <typename T>
struct FfnInit {
  Tensor<T> w1, b1, w2, b2;

  static FfnInit make(int c, double expansion, Rng& rng) {
    int m = static_cast<int>(std::lround(expansion * c));
    if (m < 1) throw ConfigError("FfnInit: expansion too small");
    FfnInit f;
    f.w1 = rng.uniform_tensor<T>({2 * m, c}, -1.0 / std::sqrt(double(c)),
                                 1.0 / std::sqrt(double(c)));
    f.b1 = Tensor<T>({2 * m});
    f.w2 = rng.uniform_tensor<T>({c, m}, -1.0 / std::sqrt(double(m)),
                                 1.0 / std::sqrt(double(m)));
    f.b2 = Tensor<T>({c});
    return f;
  }
};

template <typename T>
FfnVars bind_ffn(Tape<T>& t, const FfnInit<T>& f, bool trainable) {
  return {t.input(f.w1, trainable), t.input(f.b1, trainable), t.input(f.w2, trainable),
          t.input(f.b2, trainable)};
}

template <typename T>
Var gated_ffn(Tape<T>& t, Var x, const FfnVars& w) {
  Var wide = pointwise_conv(t, x, w.w1, w.b1);
  int m = t.val(wide).shape()[0] / 2;
  Var gate = mul(t, slice_chan(t, wide, 0, m), silu(t, slice_chan(t, wide, m, m)));
  return pointwise_conv(t, gate, w.w2, w.b2);
}

// Two residual sub-steps: X' = BankedScan(FFN(Norm(X))) + X, then
// X'' = FFN(Norm(X')) + X'.
struct DecoderBlockVars {
  Var n1_gamma, n1_beta;
  FfnVars ffn1;
  BankedScanVars banked;
  Var n2_gamma, n2_beta;
  FfnVars ffn2;
};

template <typename T>
struct DecoderBlockInit {
  Tensor<T> n1_gamma, n1_beta, n2_gamma, n2_beta;
  FfnInit<T> ffn1, ffn2;
  BankedScanInit<T> banked;

  static DecoderBlockInit make(int c, const BlockConfig& cfg, Rng& rng) {
    if (cfg.chunks < 1 || c % cfg.chunks != 0)
      throw ConfigError("DecoderBlockInit: width " + std::to_string(c) +
                        " not divisible into " + std::to_string(cfg.chunks) + " chunks");
    DecoderBlockInit d;
    d.n1_gamma = Tensor<T>::full({c}, T(1));
    d.n1_beta = Tensor<T>({c});
    d.n2_gamma = Tensor<T>::full({c}, T(1));
    d.n2_beta = Tensor<T>({c});
    d.ffn1 = FfnInit<T>::make(c, cfg.ffn_expansion, rng);
    d.ffn2 = FfnInit<T>::make(c, cfg.ffn_expansion, rng);
    d.banked = BankedScanInit<T>::make(c / cfg.chunks, cfg.state_dim, rng);
    return d;
  }
};

template <typename T>
DecoderBlockVars bind_decoder_block(Tape<T>& t, const DecoderBlockInit<T>& d, bool trainable) {
  DecoderBlockVars v;
  v.n1_gamma = t.input(d.n1_gamma, trainable);
  v.n1_beta = t.input(d.n1_beta, trainable);
  v.ffn1 = bind_ffn(t, d.ffn1, trainable);
  v.banked = bind_banked(t, d.banked, trainable);
  v.n2_gamma = t.input(d.n2_gamma, trainable);
  v.n2_beta = t.input(d.n2_beta, trainable);
  v.ffn2 = bind_ffn(t, d.ffn2, trainable);
  return v;
}

// `scan_out`, when given, receives the raw chunked-scan output (before the
// residual add) — the feature the channel-activity report probes.
template <typename T>
Var decoder_block(Tape<T>& t, Var x, const DecoderBlockVars& w, int chunks, int bank_depth,
                  Var* scan_out = nullptr) {
  Var f1 = gated_ffn(t, layer_norm_chan(t, x, w.n1_gamma, w.n1_beta), w.ffn1);
  Var scanned = banked_scan(t, f1, chunks, bank_depth, w.banked);
  if (scan_out != nullptr) *scan_out = scanned;
  Var xp = add(t, scanned, x);
  Var f2 = gated_ffn(t, layer_norm_chan(t, xp, w.n2_gamma, w.n2_beta), w.ffn2);
  return add(t, f2, xp);
}

// ---- named field enumeration (see scan.hpp for the convention) ----

template <typename S, typename F>
void fuse_fields(S&& s, F&& f) {
  f("gamma", s.gamma);
  f("beta", s.beta);
  f("qk_cur_w", s.qk_cur_w);
  f("qk_cur_b", s.qk_cur_b);
  f("qk_hist_w", s.qk_hist_w);
  f("qk_hist_b", s.qk_hist_b);
  f("v_cur_w", s.v_cur_w);
  f("v_cur_b", s.v_cur_b);
  f("v_hist_w", s.v_hist_w);
  f("v_hist_b", s.v_hist_b);
}

template <typename S, typename F>
void banked_fields(S&& s, F&& f) {
  mamba_fields(s.mamba, prefixed("mamba.", f));
  fuse_fields(s.fuse, prefixed("fuse.", f));
}

template <typename S, typename F>
void ffn_fields(S&& s, F&& f) {
  f("w1", s.w1);
  f("b1", s.b1);
  f("w2", s.w2);
  f("b2", s.b2);
}

template <typename S, typename F>
void decoder_block_fields(S&& s, F&& f) {
  f("n1_gamma", s.n1_gamma);
  f("n1_beta", s.n1_beta);
  ffn_fields(s.ffn1, prefixed("ffn1.", f));
  banked_fields(s.banked, prefixed("banked.", f));
  f("n2_gamma", s.n2_gamma);
  f("n2_beta", s.n2_beta);
  ffn_fields(s.ffn2, prefixed("ffn2.", f));
}

}  // namespace memscan
