#pragma once

#include <array>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "memscan/membank.hpp"

namespace memscan {

// Restoration network: a 3x3 stem, a five-scale convolutional encoder
// (widths C..16C, spatial 1..1/16), and a chain of sub-decoders, each with
// four coarse-to-fine stages of chunk-scanned blocks plus a residual image
// head. The encoder group (stem included) can be frozen so a later phase
// trains only the decoders.
struct ModelConfig {
  int base_width = 16;
  int n_subdecoders = 1;
  int chunks = 4;
  int bank_depth = 1;
  int state_dim = 8;
  int encoder_blocks_per_scale = 2;
  int decoder_blocks_per_stage = 2;
  double ffn_expansion = 2.0;
  bool freeze_encoder = false;

  int width_at(int scale) const { return base_width << scale; }

  void validate() const {
    if (base_width < 1) throw ConfigError("ModelConfig: base_width must be >= 1");
    if (n_subdecoders != 1 && n_subdecoders != 2 && n_subdecoders != 4)
      throw ConfigError("ModelConfig: n_subdecoders must be 1, 2, or 4");
    if (chunks < 1) throw ConfigError("ModelConfig: chunks must be >= 1");
    for (int k = 0; k < 5; ++k)
      if (width_at(k) % chunks != 0)
        throw ConfigError("ModelConfig: width " + std::to_string(width_at(k)) + " at scale " +
                          std::to_string(k) + " is not divisible into " + std::to_string(chunks) +
                          " chunks");
    if (bank_depth < 1) throw ConfigError("ModelConfig: bank_depth must be >= 1");
    if (state_dim < 1) throw ConfigError("ModelConfig: state_dim must be >= 1");
    if (encoder_blocks_per_scale < 1)
      throw ConfigError("ModelConfig: encoder_blocks_per_scale must be >= 1");
    if (decoder_blocks_per_stage < 1)
      throw ConfigError("ModelConfig: decoder_blocks_per_stage must be >= 1");
    if (!(ffn_expansion > 0)) throw ConfigError("ModelConfig: ffn_expansion must be positive");
  }

  BlockConfig block_config() const { return {chunks, bank_depth, state_dim, ffn_expansion}; }
};

// ---- convolution weight pairs ----

struct ConvVars {
  Var w, b;
};

template <typename T>
struct ConvInit {
  Tensor<T> w, b;

  static ConvInit conv3x3(int co, int ci, Rng& rng) {
    double bound = 1.0 / std::sqrt(double(ci) * 9.0);
    return {rng.uniform_tensor<T>({co, ci, 3, 3}, -bound, bound), Tensor<T>({co})};
  }
  static ConvInit conv1x1(int co, int ci, Rng& rng) {
    double bound = 1.0 / std::sqrt(double(ci));
    return {rng.uniform_tensor<T>({co, ci}, -bound, bound), Tensor<T>({co})};
  }
};

template <typename T>
ConvVars bind_conv(Tape<T>& t, const ConvInit<T>& c, bool trainable) {
  return {t.input(c.w, trainable), t.input(c.b, trainable)};
}

template <typename S, typename F>
void conv_fields(S&& s, F&& f) {
  f("w", s.w);
  f("b", s.b);
}

// ---- encoder ----

template <typename T>
struct EncoderInit {
  std::vector<std::vector<ConvInit<T>>> blocks;  // [scale][block], width-preserving 3x3
  std::vector<ConvInit<T>> downs;                // [scale], stride-2 3x3 doubling width
};

struct EncoderVars {
  std::vector<std::vector<ConvVars>> blocks;
  std::vector<ConvVars> downs;
};

template <typename T>
EncoderVars bind_encoder(Tape<T>& t, const EncoderInit<T>& e, bool trainable) {
  EncoderVars v;
  v.blocks.resize(e.blocks.size());
  for (std::size_t k = 0; k < e.blocks.size(); ++k)
    for (const auto& blk : e.blocks[k]) v.blocks[k].push_back(bind_conv(t, blk, trainable));
  for (const auto& d : e.downs) v.downs.push_back(bind_conv(t, d, trainable));
  return v;
}

template <typename S, typename F>
void encoder_fields(S&& s, F&& f) {
  for (std::size_t k = 0; k < s.blocks.size(); ++k)
    for (std::size_t i = 0; i < s.blocks[k].size(); ++i)
      conv_fields(s.blocks[k][i],
                  prefixed("s" + std::to_string(k) + ".b" + std::to_string(i) + ".", f));
  for (std::size_t k = 0; k < s.downs.size(); ++k)
    conv_fields(s.downs[k], prefixed("down" + std::to_string(k) + ".", f));
}

// ---- sub-decoder ----

template <typename T>
struct StageInit {
  ConvInit<T> up;    // 1x1 width reduction after 2x nearest upsampling
  ConvInit<T> fuse;  // 1x1 over the concatenated skip inputs
  std::vector<DecoderBlockInit<T>> blocks;
};

struct StageVars {
  ConvVars up, fuse;
  std::vector<DecoderBlockVars> blocks;
};

template <typename S, typename F>
void stage_fields(S&& s, F&& f) {
  conv_fields(s.up, prefixed("up.", f));
  conv_fields(s.fuse, prefixed("fuse.", f));
  for (std::size_t i = 0; i < s.blocks.size(); ++i)
    decoder_block_fields(s.blocks[i], prefixed("blk" + std::to_string(i) + ".", f));
}

template <typename T>
struct SubDecoderInit {
  std::vector<StageInit<T>> stages;  // indexed by output scale 0..3; run 3 -> 0
  ConvInit<T> head;                  // 3x3 to the 3-channel residual image
};

struct SubDecoderVars {
  std::vector<StageVars> stages;
  ConvVars head;
};

template <typename T>
SubDecoderVars bind_subdecoder(Tape<T>& t, const SubDecoderInit<T>& d, bool trainable) {
  SubDecoderVars v;
  for (const auto& st : d.stages) {
    StageVars sv;
    sv.up = bind_conv(t, st.up, trainable);
    sv.fuse = bind_conv(t, st.fuse, trainable);
    for (const auto& blk : st.blocks) sv.blocks.push_back(bind_decoder_block(t, blk, trainable));
    v.stages.push_back(std::move(sv));
  }
  v.head = bind_conv(t, d.head, trainable);
  return v;
}

template <typename S, typename F>
void subdecoder_fields(S&& s, F&& f) {
  for (std::size_t k = 0; k < s.stages.size(); ++k)
    stage_fields(s.stages[k], prefixed("s" + std::to_string(k) + ".", f));
  conv_fields(s.head, prefixed("head.", f));
}

// ---- full model ----

template <typename T>
struct Model {
  ModelConfig cfg;
  ConvInit<T> shallow;
  EncoderInit<T> encoder;
  std::vector<SubDecoderInit<T>> decoders;
  bool encoder_frozen = false;

  static Model make(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    m.encoder_frozen = cfg.freeze_encoder;
    int c = cfg.base_width;
    m.shallow = ConvInit<T>::conv3x3(c, 3, rng);
    m.encoder.blocks.resize(5);
    for (int k = 0; k < 5; ++k)
      for (int i = 0; i < cfg.encoder_blocks_per_scale; ++i)
        m.encoder.blocks[static_cast<std::size_t>(k)].push_back(
            ConvInit<T>::conv3x3(c << k, c << k, rng));
    for (int k = 0; k < 4; ++k)
      m.encoder.downs.push_back(ConvInit<T>::conv3x3(c << (k + 1), c << k, rng));
    for (int j = 0; j < cfg.n_subdecoders; ++j) {
      SubDecoderInit<T> d;
      d.stages.resize(4);
      for (int k = 0; k < 4; ++k) {
        int wk = c << k;
        StageInit<T>& st = d.stages[static_cast<std::size_t>(k)];
        st.up = ConvInit<T>::conv1x1(wk, c << (k + 1), rng);
        // First sub-decoder fuses [upsampled, encoder skip]; later ones also
        // take the previous sub-decoder's features at this scale.
        st.fuse = ConvInit<T>::conv1x1(wk, (j == 0 ? 2 : 3) * wk, rng);
        for (int i = 0; i < cfg.decoder_blocks_per_stage; ++i)
          st.blocks.push_back(DecoderBlockInit<T>::make(wk, cfg.block_config(), rng));
      }
      d.head = ConvInit<T>::conv3x3(3, c, rng);
      m.decoders.push_back(std::move(d));
    }
    return m;
  }
};

template <typename T>
struct BoundModel {
  ConvVars shallow;
  EncoderVars encoder;
  std::vector<SubDecoderVars> decoders;
};

// Enumerates every parameter as f(name, field&); identical traversal order for
// the tensor-owning Model and the tape-bound BoundModel.
template <typename M, typename F>
void model_fields(M&& m, F&& f) {
  conv_fields(m.shallow, prefixed("shallow.", f));
  encoder_fields(m.encoder, prefixed("enc.", f));
  for (std::size_t j = 0; j < m.decoders.size(); ++j)
    subdecoder_fields(m.decoders[j], prefixed("dec" + std::to_string(j) + ".", f));
}

// The freezable group: the stem plus every encoder parameter.
inline bool is_encoder_param(const std::string& name) {
  return name.rfind("shallow.", 0) == 0 || name.rfind("enc.", 0) == 0;
}

template <typename T>
BoundModel<T> bind_model(Tape<T>& t, const Model<T>& m, bool trainable) {
  bool enc_train = trainable && !m.encoder_frozen;
  BoundModel<T> b;
  b.shallow = bind_conv(t, m.shallow, enc_train);
  b.encoder = bind_encoder(t, m.encoder, enc_train);
  for (const auto& d : m.decoders) b.decoders.push_back(bind_subdecoder(t, d, trainable));
  return b;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> named_params(Model<T>& m) {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  model_fields(m, [&](const std::string& n, Tensor<T>& x) { out.emplace_back(n, &x); });
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> named_params(const Model<T>& m) {
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  model_fields(m, [&](const std::string& n, const Tensor<T>& x) { out.emplace_back(n, &x); });
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Var>> named_vars(const BoundModel<T>& b) {
  std::vector<std::pair<std::string, Var>> out;
  model_fields(b, [&](const std::string& n, const Var& v) { out.emplace_back(n, v); });
  return out;
}

// ---- forward pass ----

template <typename T>
using CaptureFn = std::function<void(const std::string&, const Tensor<T>&)>;

// Stem: one 3x3 convolution from the 3-channel image to the base width.
// Requires spatial dims that survive four halvings.
template <typename T>
Var shallow_extract(Tape<T>& t, const ConvVars& w, Var image) {
  const Shape ishape = t.val(image).shape();
  if (ishape.ndim() != 3 || ishape[0] != 3)
    throw ConfigError("shallow_extract: need a {3,H,W} image, got " + ishape.str());
  int h = ishape[1], wd = ishape[2];
  if (h < 16 || wd < 16 || h % 16 != 0 || wd % 16 != 0)
    throw ConfigError("shallow_extract: spatial dims " + std::to_string(h) + "x" +
                      std::to_string(wd) + " must be multiples of 16");
  return conv2d(t, image, w.w, w.b, 1, 1);
}

// Five scales: residual convolution blocks at each width, strided-conv
// downsampling in between. e[k] has width C*2^k at spatial / 2^k.
template <typename T>
std::array<Var, 5> encoder_forward(Tape<T>& t, const EncoderVars& e, Var shallow) {
  std::array<Var, 5> feats{};
  Var cur = shallow;
  for (int k = 0; k < 5; ++k) {
    if (k > 0)
      cur = conv2d(t, cur, e.downs[static_cast<std::size_t>(k - 1)].w,
                   e.downs[static_cast<std::size_t>(k - 1)].b, 2, 1);
    for (const ConvVars& blk : e.blocks[static_cast<std::size_t>(k)])
      cur = add(t, cur, conv2d(t, silu(t, cur), blk.w, blk.b, 1, 1));
    feats[static_cast<std::size_t>(k)] = cur;
  }
  return feats;
}

struct SubDecoderOut {
  std::array<Var, 4> features;  // per output scale 0..3
  Var residual;                 // {3,H,W}
};

// Four coarse-to-fine stages: upsample what came from below, fuse with the
// encoder skip at that scale (and the previous sub-decoder's features when
// chained), run the scanned blocks, and finish with a 3x3 residual head.
template <typename T>
SubDecoderOut subdecoder_forward(Tape<T>& t, const SubDecoderVars& dec, const ModelConfig& cfg,
                                 const std::array<Var, 5>& e, const std::array<Var, 4>* prev,
                                 const std::string& capture_prefix = "",
                                 const CaptureFn<T>* capture = nullptr) {
  SubDecoderOut out;
  Var below = e[4];
  for (int k = 3; k >= 0; --k) {
    const StageVars& st = dec.stages[static_cast<std::size_t>(k)];
    Var up = pointwise_conv(t, upsample_nearest2(t, below), st.up.w, st.up.b);
    std::vector<Var> cat = {up, e[static_cast<std::size_t>(k)]};
    if (prev != nullptr) cat.push_back((*prev)[static_cast<std::size_t>(k)]);
    Var x = pointwise_conv(t, concat_chan(t, cat), st.fuse.w, st.fuse.b);
    for (std::size_t i = 0; i < st.blocks.size(); ++i) {
      Var scan_out{};
      bool want = capture != nullptr && *capture;
      x = decoder_block(t, x, st.blocks[i], cfg.chunks, cfg.bank_depth,
                        want ? &scan_out : nullptr);
      if (want)
        (*capture)(capture_prefix + "s" + std::to_string(k) + ".blk" + std::to_string(i),
                   t.val(scan_out));
    }
    out.features[static_cast<std::size_t>(k)] = x;
    below = x;
  }
  out.residual = conv2d(t, out.features[0], dec.head.w, dec.head.b, 1, 1);
  return out;
}

struct ModelOutputs {
  std::vector<Var> residuals;  // per sub-decoder, {3,H,W}
  std::vector<Var> restored;   // residual + input image, same order
};

template <typename T>
ModelOutputs model_forward(Tape<T>& t, const BoundModel<T>& m, const ModelConfig& cfg, Var image,
                           const CaptureFn<T>* capture = nullptr) {
  std::array<Var, 5> e = encoder_forward(t, m.encoder, shallow_extract(t, m.shallow, image));
  ModelOutputs out;
  std::array<Var, 4> prev_d{};
  for (std::size_t j = 0; j < m.decoders.size(); ++j) {
    SubDecoderOut sub =
        subdecoder_forward(t, m.decoders[j], cfg, e, j > 0 ? &prev_d : nullptr,
                           "dec" + std::to_string(j) + ".", capture);
    out.residuals.push_back(sub.residual);
    out.restored.push_back(add(t, sub.residual, image));
    prev_d = sub.features;
  }
  return out;
}

}  // namespace memscan
