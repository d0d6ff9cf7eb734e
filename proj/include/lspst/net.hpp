#ifndef LSPST_NET_HPP
#define LSPST_NET_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lspst/ops.hpp"
#include "lspst/rng.hpp"
#include "lspst/tensor.hpp"

namespace lspst {

template <class T>
struct ParamEntry {
  std::string name;
  BasicTensor<T> tensor;
  bool trainable = true;
};

template <class T>
using ParamList = std::vector<ParamEntry<T>>;

// Collects parameters under dotted-path names during model construction.
template <class T>
class ParamRegistrar {
 public:
  ParamRegistrar(ParamList<T>& list, std::string prefix)
      : list_(&list), prefix_(std::move(prefix)) {}

  ParamRegistrar scoped(const std::string& sub) const {
    return ParamRegistrar(*list_, prefix_ + sub + ".");
  }

  BasicTensor<T>& add(const std::string& name, BasicTensor<T> t,
                      bool trainable) {
    t.set_requires_grad(trainable);
    list_->push_back(ParamEntry<T>{prefix_ + name, std::move(t), trainable});
    return list_->back().tensor;
  }

 private:
  ParamList<T>* list_;
  std::string prefix_;
};

namespace init {

// Fan-in normal; draws happen in double so every scalar instantiation sees
// identical values.
template <class T>
BasicTensor<T> conv_weight(Rng& rng, int cout, int cin_pg, int kh, int kw,
                           double gain = 2.0) {
  const double stddev = std::sqrt(gain / double(cin_pg * kh * kw));
  return BasicTensor<T>::randn(Shape{cout, cin_pg, kh, kw}, rng, stddev);
}

template <class T>
BasicTensor<T> channel_vector(int c, double value) {
  return BasicTensor<T>(Shape{1, c, 1, 1}, T(value));
}

}  // namespace init

template <class T>
struct ConvLayer {
  BasicTensor<T> w;
  BasicTensor<T> b;  // invalid handle when bias-free
  Conv2dSpec spec;

  static ConvLayer make(ParamRegistrar<T> reg, Rng& rng, int cin, int cout,
                        int kh, int kw, Conv2dSpec spec, bool bias,
                        bool trainable, double gain = 2.0) {
    ConvLayer l;
    l.spec = spec;
    l.w = reg.add("weight",
                  init::conv_weight<T>(rng, cout, cin / spec.groups, kh, kw,
                                       gain),
                  trainable);
    if (bias)
      l.b = reg.add("bias", init::channel_vector<T>(cout, 0.0), trainable);
    return l;
  }

  static ConvLayer make_depthwise(ParamRegistrar<T> reg, Rng& rng, int c,
                                  int kh, int kw, int dilation, bool trainable,
                                  double gain = 2.0) {
    Conv2dSpec sp;
    sp.groups = c;
    sp.dilation = dilation;
    sp.pad_h = dilation * (kh - 1) / 2;
    sp.pad_w = dilation * (kw - 1) / 2;
    return make(reg, rng, c, c, kh, kw, sp, true, trainable, gain);
  }

  BasicTensor<T> forward(BasicTape<T>& tape, const BasicTensor<T>& x) const {
    return conv2d(tape, x, w, b.valid() ? &b : nullptr, spec);
  }
};

template <class T>
struct NormLayer {
  BasicTensor<T> gamma, beta;
  int groups = 8;

  static NormLayer make(ParamRegistrar<T> reg, int c, int groups,
                        bool trainable) {
    NormLayer n;
    n.groups = groups;
    n.gamma = reg.add("gamma", init::channel_vector<T>(c, 1.0), trainable);
    n.beta = reg.add("beta", init::channel_vector<T>(c, 0.0), trainable);
    return n;
  }

  BasicTensor<T> forward(BasicTape<T>& tape, const BasicTensor<T>& x) const {
    return group_norm(tape, x, groups, gamma, beta);
  }
};

// Large-kernel operator: 3x3 and 5x5 depthwise stages for interior structure,
// a decomposed 1x7/7x1 strip pair for boundaries, fused by a 1x1 conv.
// The variants exist for the ablation grid.
enum class SConvVariant { full, chain, small, square };

inline const char* sconv_variant_name(SConvVariant v) {
  switch (v) {
    case SConvVariant::full: return "full";
    case SConvVariant::chain: return "chain";
    case SConvVariant::small: return "small";
    case SConvVariant::square: return "square";
  }
  return "?";
}

template <class T>
struct SConvParams {
  SConvVariant variant = SConvVariant::full;
  ConvLayer<T> dw3, dw5;
  ConvLayer<T> strip_h, strip_v;  // full variant
  ConvLayer<T> square7;           // square variant
  ConvLayer<T> fuse;              // 1x1, branches*c -> c

  static SConvParams make(ParamRegistrar<T> reg, Rng& rng, int c,
                          bool trainable,
                          SConvVariant variant = SConvVariant::full) {
    SConvParams p;
    p.variant = variant;
    p.dw3 = ConvLayer<T>::make_depthwise(reg.scoped("dw3"), rng, c, 3, 3, 1,
                                         trainable);
    p.dw5 = ConvLayer<T>::make_depthwise(reg.scoped("dw5"), rng, c, 5, 5, 1,
                                         trainable);
    if (variant == SConvVariant::full) {
      p.strip_h = ConvLayer<T>::make_depthwise(reg.scoped("strip_h"), rng, c,
                                               1, 7, 1, trainable);
      p.strip_v = ConvLayer<T>::make_depthwise(reg.scoped("strip_v"), rng, c,
                                               7, 1, 1, trainable);
    } else if (variant == SConvVariant::square) {
      p.square7 = ConvLayer<T>::make_depthwise(reg.scoped("square7"), rng, c,
                                               7, 7, 1, trainable);
    }
    const int branches = variant == SConvVariant::chain ? 1
                         : variant == SConvVariant::small ? 2
                                                          : 3;
    p.fuse = ConvLayer<T>::make(reg.scoped("fuse"), rng, branches * c, c, 1, 1,
                                Conv2dSpec{}, true, trainable);
    return p;
  }

  BasicTensor<T> forward(BasicTape<T>& tape, const BasicTensor<T>& x) const {
    auto d3 = dw3.forward(tape, x);
    auto d5 = dw5.forward(tape, d3);
    switch (variant) {
      case SConvVariant::chain:
        return fuse.forward(tape, d5);
      case SConvVariant::small:
        return fuse.forward(tape, concat_channels(tape, {d3, d5}));
      case SConvVariant::square: {
        auto sq = square7.forward(tape, add(tape, d3, d5));
        return fuse.forward(tape, concat_channels(tape, {d3, d5, sq}));
      }
      case SConvVariant::full:
      default: {
        auto strips =
            strip_v.forward(tape, strip_h.forward(tape, add(tape, d3, d5)));
        return fuse.forward(tape, concat_channels(tape, {d3, d5, strips}));
      }
    }
  }
};

// Multi-scale attention: channel split into r equal branches, cascaded
// SConv at resolutions p/2^j (branch 0 stays at native resolution), spatial
// gates from pooled maps, Hadamard combination with a 1x1-conv value path.
template <class T>
struct SelkaParams {
  int r = 2;
  bool cascade = true;
  bool gate = true;
  ConvLayer<T> fc_in, fc_out, v_conv;
  std::vector<SConvParams<T>> branch;
  ConvLayer<T> spatial;  // 7x7, 2r -> r

  static SelkaParams make(ParamRegistrar<T> reg, Rng& rng, int c, int r,
                          bool trainable,
                          SConvVariant variant = SConvVariant::full,
                          bool cascade = true, bool gate = true) {
    if (r < 1 || c % r != 0)
      throw std::invalid_argument("selka: branch count " + std::to_string(r) +
                                  " must divide channels " +
                                  std::to_string(c));
    SelkaParams p;
    p.r = r;
    p.cascade = cascade;
    p.gate = gate;
    p.fc_in = ConvLayer<T>::make(reg.scoped("fc_in"), rng, c, c, 1, 1,
                                 Conv2dSpec{}, true, trainable);
    p.fc_out = ConvLayer<T>::make(reg.scoped("fc_out"), rng, c, c, 1, 1,
                                  Conv2dSpec{}, true, trainable);
    p.v_conv = ConvLayer<T>::make(reg.scoped("v_conv"), rng, c, c, 1, 1,
                                  Conv2dSpec{}, true, trainable);
    for (int j = 0; j < r; ++j)
      p.branch.push_back(SConvParams<T>::make(
          reg.scoped("branch" + std::to_string(j)), rng, c / r, trainable,
          variant));
    Conv2dSpec sp;
    sp.pad_h = sp.pad_w = 3;
    p.spatial = ConvLayer<T>::make(reg.scoped("spatial"), rng, 2 * r, r, 7, 7,
                                   sp, true, trainable);
    return p;
  }

  // Branch j processes at resolution p / 2^j; j > 0 consumes the running sum
  // with the previous branch output when cascading is on.
  std::vector<BasicTensor<T>> run_cascade(
      BasicTape<T>& tape, const std::vector<BasicTensor<T>>& parts) const {
    if (int(parts.size()) != r)
      throw std::invalid_argument("selka cascade: expected " +
                                  std::to_string(r) + " parts");
    const Shape s0 = parts[0].shape();
    for (const auto& p : parts)
      if (!(p.shape() == s0))
        throw std::invalid_argument("selka cascade: parts must share shape");
    const int scale_max = 1 << (r - 1);
    if (s0.h % scale_max != 0 || s0.w % scale_max != 0)
      throw std::invalid_argument(
          "selka cascade: resolution " + s0.str() +
          " not divisible by 2^(r-1) = " + std::to_string(scale_max));
    std::vector<BasicTensor<T>> outs;
    for (int j = 0; j < r; ++j) {
      BasicTensor<T> in = parts[j];
      if (j > 0 && cascade) in = add(tape, in, outs.back());
      const int f = 1 << j;
      if (f > 1) in = maxpool2d(tape, in, f);
      BasicTensor<T> y = branch[j].forward(tape, in);
      if (f > 1) y = upsample_nearest(tape, y, f);
      outs.push_back(std::move(y));
    }
    return outs;
  }

  // Pooled mean/max maps -> 7x7 conv -> sigmoid gates, one per branch.
  BasicTensor<T> spatial_attention(
      BasicTape<T>& tape, const std::vector<BasicTensor<T>>& branches) const {
    std::vector<BasicTensor<T>> maps;
    for (const auto& b : branches) {
      maps.push_back(channel_pool(tape, b, Pool::mean));
      maps.push_back(channel_pool(tape, b, Pool::max));
    }
    auto gates = spatial.forward(tape, concat_channels(tape, maps));
    auto gate_maps = split_channels(tape, gates, std::vector<int>(r, 1));
    std::vector<BasicTensor<T>> gated;
    for (int j = 0; j < r; ++j)
      gated.push_back(spatial_scale(tape, branches[j],
                                    sigmoid(tape, gate_maps[j])));
    return concat_channels(tape, gated);
  }

  BasicTensor<T> forward(BasicTape<T>& tape, const BasicTensor<T>& x) const {
    const int c = x.shape().c;
    if (c % r != 0)
      throw std::invalid_argument("selka: channels " + std::to_string(c) +
                                  " not divisible by r = " +
                                  std::to_string(r));
    auto y = gelu(tape, fc_in.forward(tape, x));
    auto parts = split_channels(tape, y, std::vector<int>(r, c / r));
    auto branches = run_cascade(tape, parts);
    auto attn = gate ? spatial_attention(tape, branches)
                     : concat_channels(tape, branches);
    auto value = v_conv.forward(tape, y);
    auto z = mul(tape, silu(tape, attn), silu(tape, value));
    return add(tape, fc_out.forward(tape, z), x);
  }
};

// Pre-activation residual block: x + conv(act(norm(conv(act(norm(x)))))).
template <class T>
struct PreBlock {
  NormLayer<T> n1, n2;
  ConvLayer<T> c1, c2;

  static PreBlock make(ParamRegistrar<T> reg, Rng& rng, int c, int groups,
                       bool trainable) {
    PreBlock b;
    b.n1 = NormLayer<T>::make(reg.scoped("norm1"), c, groups, trainable);
    Conv2dSpec sp;
    sp.pad_h = sp.pad_w = 1;
    b.c1 = ConvLayer<T>::make(reg.scoped("conv1"), rng, c, c, 3, 3, sp, true,
                              trainable);
    b.n2 = NormLayer<T>::make(reg.scoped("norm2"), c, groups, trainable);
    b.c2 = ConvLayer<T>::make(reg.scoped("conv2"), rng, c, c, 3, 3, sp, true,
                              trainable);
    return b;
  }

  BasicTensor<T> forward(BasicTape<T>& tape, const BasicTensor<T>& x) const {
    auto h = c1.forward(tape, silu(tape, n1.forward(tape, x)));
    h = c2.forward(tape, silu(tape, n2.forward(tape, h)));
    return add(tape, x, h);
  }
};

// Attention plus task-adaptation residuals, each LayerScale-gated. With both
// lambdas at zero the block is exactly the identity.
template <class T>
struct HdconvBlock {
  bool use_attention = true;
  bool use_residual = true;
  NormLayer<T> norm;
  SelkaParams<T> selka;
  BasicTensor<T> lambda1, lambda2;
  PreBlock<T> pre1, pre2;

  struct Options {
    int r = 2;
    int groups = 8;
    double layerscale_init = 1e-2;
    SConvVariant sconv = SConvVariant::full;
    bool selka_cascade = true;
    bool selka_gate = true;
    bool attention = true;
    bool residual = true;
  };

  static HdconvBlock make(ParamRegistrar<T> reg, Rng& rng, int c,
                          const Options& o, bool trainable) {
    HdconvBlock b;
    b.use_attention = o.attention;
    b.use_residual = o.residual;
    b.norm = NormLayer<T>::make(reg.scoped("norm"), c, o.groups, trainable);
    b.selka = SelkaParams<T>::make(reg.scoped("selka"), rng, c, o.r, trainable,
                                   o.sconv, o.selka_cascade, o.selka_gate);
    b.lambda1 = reg.add("lambda1",
                        init::channel_vector<T>(c, o.layerscale_init),
                        trainable);
    b.lambda2 = reg.add("lambda2",
                        init::channel_vector<T>(c, o.layerscale_init),
                        trainable);
    b.pre1 = PreBlock<T>::make(reg.scoped("pre1"), rng, c, o.groups, trainable);
    b.pre2 = PreBlock<T>::make(reg.scoped("pre2"), rng, c, o.groups, trainable);
    return b;
  }

  BasicTensor<T> forward(BasicTape<T>& tape, const BasicTensor<T>& x) const {
    BasicTensor<T> cur = x;
    if (use_attention) {
      auto a = selka.forward(tape, norm.forward(tape, cur));
      cur = add(tape, cur, channel_scale(tape, a, lambda1));
    }
    if (use_residual) {
      auto h = pre2.forward(tape, pre1.forward(tape, cur));
      cur = add(tape, cur, channel_scale(tape, h, lambda2));
    }
    return cur;
  }
};

// Channel reduction to the side branch width: 1x1 reduce, three parallel
// depthwise 3x3 convs at dilations {1,3,5}, summed, 1x1 fuse.
template <class T>
struct RfbReduce {
  ConvLayer<T> reduce;
  ConvLayer<T> dw_d1, dw_d3, dw_d5;
  ConvLayer<T> fuse;

  static RfbReduce make(ParamRegistrar<T> reg, Rng& rng, int cin, int cout,
                        bool trainable) {
    RfbReduce r;
    r.reduce = ConvLayer<T>::make(reg.scoped("reduce"), rng, cin, cout, 1, 1,
                                  Conv2dSpec{}, true, trainable);
    r.dw_d1 = ConvLayer<T>::make_depthwise(reg.scoped("dw_d1"), rng, cout, 3,
                                           3, 1, trainable);
    r.dw_d3 = ConvLayer<T>::make_depthwise(reg.scoped("dw_d3"), rng, cout, 3,
                                           3, 3, trainable);
    r.dw_d5 = ConvLayer<T>::make_depthwise(reg.scoped("dw_d5"), rng, cout, 3,
                                           3, 5, trainable);
    r.fuse = ConvLayer<T>::make(reg.scoped("fuse"), rng, cout, cout, 1, 1,
                                Conv2dSpec{}, true, trainable);
    return r;
  }

  BasicTensor<T> forward(BasicTape<T>& tape, const BasicTensor<T>& x) const {
    auto y = reduce.forward(tape, x);
    auto s = add(tape, add(tape, dw_d1.forward(tape, y), dw_d3.forward(tape, y)),
                 dw_d5.forward(tape, y));
    return fuse.forward(tape, s);
  }
};

// Frozen convolutional pyramid standing in for a pretrained encoder: only the
// normalization affines train. Stages sit at 1/4, 1/8, 1/16, 1/32 of the
// input; the stem at 1/2.
template <class T>
struct BackboneStub {
  struct Stage {
    ConvLayer<T> down;
    NormLayer<T> norm;
    std::vector<ConvLayer<T>> convs;
  };

  ConvLayer<T> stem_conv;
  NormLayer<T> stem_norm;
  std::array<Stage, 4> stages;

  struct Features {
    BasicTensor<T> stem;
    std::array<BasicTensor<T>, 4> stage;
  };

  static BackboneStub make(ParamRegistrar<T> reg, Rng& rng, int in_channels,
                           int stem_channels,
                           const std::array<int, 4>& channels,
                           const std::array<int, 4>& depth, int groups,
                           bool norm_trainable) {
    BackboneStub b;
    Conv2dSpec s2;
    s2.stride = 2;
    s2.pad_h = s2.pad_w = 1;
    b.stem_conv = ConvLayer<T>::make(reg.scoped("stem.conv"), rng, in_channels,
                                     stem_channels, 3, 3, s2, false, false);
    b.stem_norm = NormLayer<T>::make(reg.scoped("stem.norm"), stem_channels,
                                     groups, norm_trainable);
    int cin = stem_channels;
    for (int s = 0; s < 4; ++s) {
      auto sreg = reg.scoped("stage" + std::to_string(s + 1));
      Stage st;
      st.down = ConvLayer<T>::make(sreg.scoped("down"), rng, cin, channels[s],
                                   3, 3, s2, false, false);
      st.norm = NormLayer<T>::make(sreg.scoped("norm"), channels[s], groups,
                                   norm_trainable);
      Conv2dSpec s1;
      s1.pad_h = s1.pad_w = 1;
      for (int d = 0; d < depth[s]; ++d)
        st.convs.push_back(ConvLayer<T>::make(
            sreg.scoped("conv" + std::to_string(d + 1)), rng, channels[s],
            channels[s], 3, 3, s1, false, false));
      b.stages[s] = std::move(st);
      cin = channels[s];
    }
    return b;
  }

  Features forward(BasicTape<T>& tape, const BasicTensor<T>& x) const {
    Features f;
    auto h = silu(tape, stem_norm.forward(tape, stem_conv.forward(tape, x)));
    f.stem = h;
    for (int s = 0; s < 4; ++s) {
      const Stage& st = stages[s];
      h = silu(tape, st.norm.forward(tape, st.down.forward(tape, h)));
      for (const auto& cv : st.convs) h = silu(tape, cv.forward(tape, h));
      f.stage[s] = h;
    }
    return f;
  }
};

struct ModelConfig {
  uint64_t seed = 1;
  int in_channels = 1;
  int input_size = 64;  // nominal; fixes per-stage branch counts
  int stem_channels = 32;
  std::array<int, 4> stage_channels = {32, 64, 160, 320};
  std::array<int, 4> stage_depth = {1, 1, 2, 2};  // extra convs per stage
  int side_channels = 32;
  int decoder_channels = 16;
  int r = 2;
  int groups = 8;
  double layerscale_init = 1e-2;
  bool norm_tuning = true;
  bool use_side = true;
  bool hdconv_attention = true;
  bool hdconv_residual = true;
  bool selka_cascade = true;
  bool selka_gate = true;
  SConvVariant sconv = SConvVariant::full;
};

// Largest r' <= r with c % r' == 0 and p divisible by 2^(r'-1); deep stages
// at small resolutions fall back to fewer branches.
inline int clamp_branches(int r, int c, int p) {
  for (int rr = r; rr >= 1; --rr) {
    const int scale = 1 << (rr - 1);
    if (c % rr == 0 && p % scale == 0 && p / scale >= 1) return rr;
  }
  return 1;
}

template <class T>
struct DecoderLevel {
  ConvLayer<T> conv1, conv2;
  NormLayer<T> norm1, norm2;

  static DecoderLevel make(ParamRegistrar<T> reg, Rng& rng, int cin, int cout,
                           int groups, bool trainable) {
    DecoderLevel l;
    Conv2dSpec sp;
    sp.pad_h = sp.pad_w = 1;
    l.conv1 = ConvLayer<T>::make(reg.scoped("conv1"), rng, cin, cout, 3, 3, sp,
                                 true, trainable);
    l.norm1 = NormLayer<T>::make(reg.scoped("norm1"), cout, groups, trainable);
    l.conv2 = ConvLayer<T>::make(reg.scoped("conv2"), rng, cout, cout, 3, 3,
                                 sp, true, trainable);
    l.norm2 = NormLayer<T>::make(reg.scoped("norm2"), cout, groups, trainable);
    return l;
  }

  BasicTensor<T> forward(BasicTape<T>& tape, const BasicTensor<T>& x) const {
    auto h = silu(tape, norm1.forward(tape, conv1.forward(tape, x)));
    return silu(tape, norm2.forward(tape, conv2.forward(tape, h)));
  }
};

// The side-tuned detector: frozen pyramid, per-stage channel reduction, a
// ladder of HDConv blocks fed top-down by one-way lateral connections, a
// U-Net style decoder with a stem skip, and a sigmoid confidence head.
template <class T>
struct LspstModelT {
  ModelConfig cfg;
  BackboneStub<T> backbone;
  std::array<RfbReduce<T>, 4> rfb;
  std::vector<HdconvBlock<T>> ladder;  // one per stage when use_side
  std::array<DecoderLevel<T>, 4> decoder;
  ConvLayer<T> head;
  ParamList<T> params;

  explicit LspstModelT(const ModelConfig& c) : cfg(c) {
    Rng rng(cfg.seed);
    ParamRegistrar<T> reg(params, "");
    backbone = BackboneStub<T>::make(
        reg.scoped("backbone"), rng, cfg.in_channels, cfg.stem_channels,
        cfg.stage_channels, cfg.stage_depth, cfg.groups, cfg.norm_tuning);
    for (int s = 0; s < 4; ++s)
      rfb[s] = RfbReduce<T>::make(
          reg.scoped("rfb.stage" + std::to_string(s + 1)), rng,
          cfg.stage_channels[s], cfg.side_channels, true);
    if (cfg.use_side) {
      for (int s = 0; s < 4; ++s) {
        typename HdconvBlock<T>::Options o;
        const int stage_res = cfg.input_size >> (2 + s);
        o.r = clamp_branches(cfg.r, cfg.side_channels, stage_res);
        o.groups = cfg.groups;
        o.layerscale_init = cfg.layerscale_init;
        o.sconv = cfg.sconv;
        o.selka_cascade = cfg.selka_cascade;
        o.selka_gate = cfg.selka_gate;
        o.attention = cfg.hdconv_attention;
        o.residual = cfg.hdconv_residual;
        ladder.push_back(HdconvBlock<T>::make(
            reg.scoped("side.stage" + std::to_string(s + 1) + ".hdconv"), rng,
            cfg.side_channels, o, true));
      }
    }
    const int sc = cfg.side_channels, dc = cfg.decoder_channels;
    decoder[0] = DecoderLevel<T>::make(reg.scoped("decoder.level1"), rng,
                                       sc + sc, dc, cfg.groups, true);
    decoder[1] = DecoderLevel<T>::make(reg.scoped("decoder.level2"), rng,
                                       dc + sc, dc, cfg.groups, true);
    decoder[2] = DecoderLevel<T>::make(reg.scoped("decoder.level3"), rng,
                                       dc + sc, dc, cfg.groups, true);
    decoder[3] = DecoderLevel<T>::make(reg.scoped("decoder.level4"), rng,
                                       dc + cfg.stem_channels, dc, cfg.groups,
                                       true);
    head = ConvLayer<T>::make(reg.scoped("head"), rng, dc, 1, 1, 1,
                              Conv2dSpec{}, true, true);
  }

  BasicTensor<T> forward(BasicTape<T>& tape, const BasicTensor<T>& image) const {
    const Shape s = image.shape();
    if (s.h % 32 != 0 || s.w % 32 != 0)
      throw std::invalid_argument("model: input " + s.str() +
                                  " must be divisible by 32");
    tape.set_region("backbone");
    auto feats = backbone.forward(tape, image);

    tape.set_region("side");
    std::array<BasicTensor<T>, 4> side;
    for (int st = 0; st < 4; ++st) {
      auto f = rfb[st].forward(tape, feats.stage[st]);
      if (cfg.use_side) {
        if (st > 0) f = add(tape, f, maxpool2d(tape, side[st - 1], 2));
        f = ladder[st].forward(tape, f);
      }
      side[st] = f;
    }

    tape.set_region("decoder");
    auto d = side[3];
    for (int lvl = 0; lvl < 3; ++lvl) {
      d = upsample_nearest(tape, d, 2);
      d = concat_channels(tape, {d, side[2 - lvl]});
      d = decoder[lvl].forward(tape, d);
    }
    d = upsample_nearest(tape, d, 2);
    d = concat_channels(tape, {d, feats.stem});
    d = decoder[3].forward(tape, d);

    tape.set_region("head");
    d = upsample_nearest(tape, d, 2);
    auto conf = sigmoid(tape, head.forward(tape, d));
    tape.set_region("");
    return conf;
  }
};

using LspstModel = LspstModelT<float>;

struct ParamCounts {
  int64_t trainable = 0;
  int64_t frozen = 0;
  int64_t total() const { return trainable + frozen; }
};

template <class T>
ParamCounts count_params(const ParamList<T>& params) {
  ParamCounts c;
  for (const auto& p : params)
    (p.trainable ? c.trainable : c.frozen) += p.tensor.numel();
  return c;
}

// FNV-1a over the raw little-endian value bytes, in registration order.
template <class T>
uint64_t digest_params(const ParamList<T>& params, bool trainable_set) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, size_t len) {
    const uint8_t* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& p : params) {
    if (p.trainable != trainable_set) continue;
    mix(p.name.data(), p.name.size());
    mix(p.tensor.data().data(), p.tensor.data().size() * sizeof(T));
  }
  return h;
}

// Copies values between models built from the same config (e.g. the double
// twin used by gradient checks). Names and shapes must line up exactly.
template <class A, class B>
void copy_parameters(const ParamList<A>& src, ParamList<B>& dst) {
  if (src.size() != dst.size())
    throw std::invalid_argument("copy_parameters: size mismatch");
  for (size_t i = 0; i < src.size(); ++i) {
    if (src[i].name != dst[i].name ||
        !(src[i].tensor.shape() == dst[i].tensor.shape()))
      throw std::invalid_argument("copy_parameters: mismatch at " +
                                  src[i].name);
    auto s = src[i].tensor.data();
    auto d = dst[i].tensor.data();
    for (size_t j = 0; j < s.size(); ++j) d[j] = B(s[j]);
  }
}

// Checkpoints: ckpt.idx holds `name offset length trainable` ASCII lines,
// ckpt.t32blob the concatenated T32 records in the same order.
void save_checkpoint(const std::string& dir, const ParamList<float>& params);
void load_checkpoint(const std::string& dir, ParamList<float>& params);

}  // namespace lspst

#endif
