#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "regmae/autodiff/ops.hpp"
#include "regmae/masking.hpp"
#include "regmae/model/config.hpp"
#include "regmae/model/lattice.hpp"
#include "regmae/random.hpp"

namespace regmae::model {

using ad::Parameter;
using ad::ParameterStore;
using ad::Tape;
using ad::Tensor;
using ad::Var;

/// Deterministic parameter factory: draws happen in registration order.
template <class S>
class Init {
 public:
  Init(ParameterStore<S>& store, std::uint64_t seed) : store_(store), rng_(derive_seed(seed, 0x1417)) {}

  Parameter<S>* uniform(const std::string& name, ad::Shape shape, double bound) {
    Tensor<S> t(std::move(shape));
    for (auto& v : t.data) v = S((2.0 * uniform01(rng_) - 1.0) * bound);
    return &store_.add(name, std::move(t));
  }
  Parameter<S>* normal(const std::string& name, ad::Shape shape, double stddev) {
    Tensor<S> t(std::move(shape));
    for (auto& v : t.data) v = S(standard_normal(rng_) * stddev);
    return &store_.add(name, std::move(t));
  }
  Parameter<S>* constant(const std::string& name, ad::Shape shape, double value) {
    return &store_.add(name, Tensor<S>::constant(std::move(shape), S(value)));
  }
  Parameter<S>* from(const std::string& name, Tensor<S> value) { return &store_.add(name, std::move(value)); }
  Rng& rng() { return rng_; }

 private:
  ParameterStore<S>& store_;
  Rng rng_;
};

template <class S>
struct Linear {
  Parameter<S>* w = nullptr;
  Parameter<S>* b = nullptr;

  Linear() = default;
  Linear(Init<S>& init, const std::string& name, int in, int out, bool bias = true)
      : w(init.uniform(name + ".weight", {in, out}, 1.0 / std::sqrt(double(in)))),
        b(bias ? init.constant(name + ".bias", {out}, 0.0) : nullptr) {}

  Var<S> operator()(Tape<S>& t, Var<S> x) const {
    if (b) return ad::linear(x, t.param(*w), std::optional<Var<S>>(t.param(*b)));
    return ad::linear(x, t.param(*w));
  }
};

template <class S>
struct LayerNorm {
  Parameter<S>* gamma = nullptr;
  Parameter<S>* beta = nullptr;

  LayerNorm() = default;
  LayerNorm(Init<S>& init, const std::string& name, int dim)
      : gamma(init.constant(name + ".gamma", {dim}, 1.0)), beta(init.constant(name + ".beta", {dim}, 0.0)) {}

  Var<S> operator()(Tape<S>& t, Var<S> x) const {
    return ad::layernorm(x, std::optional<Var<S>>(t.param(*gamma)), std::optional<Var<S>>(t.param(*beta)));
  }
};

/// Pre-norm windowed multi-head self-attention followed by a GELU MLP.
template <class S>
struct AttentionBlock {
  LayerNorm<S> ln1;
  Linear<S> q, k, v, proj;
  LayerNorm<S> ln2;
  Linear<S> fc1, fc2;
  int heads = 1;

  AttentionBlock() = default;
  AttentionBlock(Init<S>& init, const std::string& name, int dim, int n_heads, int mlp_ratio)
      : ln1(init, name + ".ln1", dim),
        q(init, name + ".attn.q", dim, dim),
        k(init, name + ".attn.k", dim, dim),
        v(init, name + ".attn.v", dim, dim),
        proj(init, name + ".attn.proj", dim, dim),
        ln2(init, name + ".ln2", dim),
        fc1(init, name + ".mlp.fc1", dim, dim * mlp_ratio),
        fc2(init, name + ".mlp.fc2", dim * mlp_ratio, dim),
        heads(n_heads) {}

  Var<S> operator()(Tape<S>& t, Var<S> x, const WindowLayout& layout,
                    std::vector<ad::RowMatrix<S>>* probe = nullptr) const {
    const std::int64_t n = x.value().dim(0);
    auto h = ad::gather_rows(ln1(t, x), layout.perm);
    auto a = ad::window_attention(q(t, h), k(t, h), v(t, h), layout.window_len, heads, layout.groups, probe);
    x = ad::add(x, ad::scatter_rows(proj(t, a), layout.perm, n));
    return ad::add(x, fc2(t, ad::gelu(fc1(t, ln2(t, x)))));
  }
};

/// Pre-norm selective state-space block with a SiLU gate.
template <class S>
struct MambaBlock {
  LayerNorm<S> ln;
  Linear<S> in_x, in_z, x_dt, x_b, x_c, dt_proj, out;
  Parameter<S>* a_log = nullptr;
  Parameter<S>* d_skip = nullptr;

  MambaBlock() = default;
  MambaBlock(Init<S>& init, const std::string& name, int dim, int state, int expand) {
    const int inner = dim * expand;
    const int rank = std::max(1, (dim + 15) / 16);
    ln = LayerNorm<S>(init, name + ".ln", dim);
    in_x = Linear<S>(init, name + ".in_x", dim, inner);
    in_z = Linear<S>(init, name + ".in_z", dim, inner);
    x_dt = Linear<S>(init, name + ".x_dt", inner, rank, false);
    x_b = Linear<S>(init, name + ".x_b", inner, state, false);
    x_c = Linear<S>(init, name + ".x_c", inner, state, false);
    dt_proj.w = init.uniform(name + ".dt_proj.weight", {rank, inner}, 1.0 / std::sqrt(double(rank)));
    // Step sizes start log-uniform in [1e-3, 1e-1]; bias is softplus^-1 of that.
    Tensor<S> dt_bias({inner});
    for (auto& v : dt_bias.data) {
      const double dt = std::exp(std::log(1e-3) + uniform01(init.rng()) * (std::log(1e-1) - std::log(1e-3)));
      v = S(dt + std::log(-std::expm1(-dt)));
    }
    dt_proj.b = init.from(name + ".dt_proj.bias", std::move(dt_bias));
    Tensor<S> a({inner, state});
    for (int c = 0; c < inner; ++c)
      for (int s = 0; s < state; ++s) a.data[c * state + s] = S(std::log(double(s + 1)));
    a_log = init.from(name + ".A_log", std::move(a));
    d_skip = init.constant(name + ".D", {inner}, 1.0);
    out = Linear<S>(init, name + ".out", inner, dim);
  }

  Var<S> operator()(Tape<S>& t, Var<S> x, const ad::IndexList& order) const {
    const std::int64_t n = x.value().dim(0);
    auto h = ln(t, x);
    if (order) h = ad::gather_rows(h, order);
    auto u = in_x(t, h);
    auto z = in_z(t, h);
    auto dt = ad::softplus(dt_proj(t, x_dt(t, u)));
    auto A = ad::neg(ad::exp(t.param(*a_log)));
    auto y = ad::selective_scan(u, dt, A, x_b(t, u), x_c(t, u), t.param(*d_skip));
    auto o = out(t, ad::mul(y, ad::silu(z)));
    if (order) o = ad::scatter_rows(o, order, n);
    return ad::add(x, o);
  }
};

/// 2x2x2 spatial neighbours concatenated and projected 8D -> 2D.
template <class S>
struct PatchMerge {
  Linear<S> proj;
  int dim = 0;

  PatchMerge() = default;
  PatchMerge(Init<S>& init, const std::string& name, int d) : proj(init, name, 8 * d, 2 * d), dim(d) {}

  Var<S> operator()(Tape<S>& t, Var<S> x, const ad::IndexList& index) const {
    const std::int64_t coarse = x.value().dim(0) / 8;
    return proj(t, ad::reshape(ad::gather_rows(x, index), {coarse, 8 * dim}));
  }
};

/// Inverse of PatchMerge: D -> 8 * (D / 2), then scattered to the 8 children.
template <class S>
struct PatchExpand {
  Linear<S> proj;
  int dim = 0;

  PatchExpand() = default;
  PatchExpand(Init<S>& init, const std::string& name, int d) : proj(init, name, d, 8 * (d / 2)), dim(d) {}

  Var<S> operator()(Tape<S>& t, Var<S> x, const ad::IndexList& index) const {
    const std::int64_t fine = x.value().dim(0) * 8;
    return ad::scatter_rows(ad::reshape(proj(t, x), {fine, dim / 2}), index, fine);
  }
};

/// Cached index plans for one input geometry.
struct Geometry {
  Index4 dims{};
  std::vector<Lattice> lattices;  // per stage
  std::vector<ad::IndexList> merge;  // merge[s]: stage s-1 -> s (s >= 1)
  std::vector<WindowLayout> plain, shifted;
  std::vector<ad::IndexList> scan;
  ad::IndexList patchify, unpatchify;
  Eigen::ArrayXd pe;
};

Geometry make_geometry(const ModelConfig& cfg, const Index4& dims);

/// Hierarchical 4D encoder-decoder with per-block attention or selective-scan
/// operators, a masked-reconstruction head and a pooled classification head.
/// Volumes enter as flat [X*Y*Z*T] vectors in Volume4D payload order.
template <class S>
class HybridModel {
 public:
  HybridModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), layout_(assign_operators(cfg)) {
    cfg_.validate();
    Init<S> init(params_, seed);
    const int D = cfg_.embed_dim;
    const int feat = cfg_.patch_size * cfg_.patch_size * cfg_.patch_size * cfg_.t_patch;
    embed_ = Linear<S>(init, "embed", feat, D);
    mask_token_ = init.normal("mask_token", {D}, 0.02);
    for (int s = 0; s < cfg_.stages(); ++s) {
      if (s > 0) merges_.emplace_back(init, "enc.merge" + std::to_string(s), cfg_.stage_dim(s - 1));
      enc_.push_back(make_stage(init, "enc.s" + std::to_string(s), s, layout_.encoder[std::size_t(s)]));
    }
    for (int s = cfg_.stages(); s-- > 0;) {
      if (s + 1 < cfg_.stages()) expands_.emplace_back(init, "dec.expand" + std::to_string(s + 1), cfg_.stage_dim(s + 1));
      dec_.push_back(make_stage(init, "dec.s" + std::to_string(s), s,
                                layout_.decoder[std::size_t(cfg_.stages() - 1 - s)]));
    }
    dec_norm_ = LayerNorm<S>(init, "dec.norm", D);
    head_ = Linear<S>(init, "head", D, feat);
    const int deep = cfg_.stage_dim(cfg_.stages() - 1);
    cls_norm_ = LayerNorm<S>(init, "cls.norm", deep);
    cls_head_ = Linear<S>(init, "cls.head", deep, 1);
  }

  HybridModel(const HybridModel&) = delete;
  HybridModel& operator=(const HybridModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const OperatorLayout& layout() const { return layout_; }
  ParameterStore<S>& params() { return params_; }
  const ParameterStore<S>& params() const { return params_; }

  /// Encoder and embedding parameters stop receiving updates.
  void freeze_encoder(bool frozen) {
    for (auto& p : params_)
      if (p->name.rfind("enc.", 0) == 0 || p->name.rfind("embed.", 0) == 0 || p->name == "mask_token")
        p->trainable = !frozen;
  }

  const Geometry& geometry(const Index4& dims) {
    if (!geom_ || geom_->dims != dims) geom_ = make_geometry(cfg_, dims);
    return *geom_;
  }

  /// Per-stage encoder outputs, shallow to deep. Slots flagged in `mask`
  /// are replaced by the learned mask token before positions are added.
  std::vector<Var<S>> encode(Tape<S>& t, Var<S> volume, const Index4& dims, const masking::MaskTensor* mask = nullptr) {
    const Geometry& g = geometry(dims);
    require(volume.size() == std::int64_t(g.patchify->size()), ErrorKind::Validation,
            "model input has " + std::to_string(volume.size()) + " values, geometry expects " +
                std::to_string(g.patchify->size()));
    const Lattice& lat0 = g.lattices.front();
    const int feat = int(std::int64_t(g.patchify->size()) / lat0.count());
    auto x = embed_(t, ad::gather(volume, g.patchify, {lat0.count(), feat}));
    if (mask) {
      require(mask->n_patches == lat0.spatial() && mask->t_patches == lat0.nt, ErrorKind::Validation,
              "mask lattice " + std::to_string(mask->n_patches) + "x" + std::to_string(mask->t_patches) +
                  " does not match token lattice " + std::to_string(lat0.spatial()) + "x" + std::to_string(lat0.nt));
      x = masking::apply_mask(x, *mask, masking::MaskMode::ReplaceLearned,
                                 std::optional<Var<S>>(t.param(*mask_token_))).tokens;
    }
    x = ad::add(x, t.constant(Tensor<S>({lat0.count(), cfg_.embed_dim}, g.pe.template cast<S>())));
    std::vector<Var<S>> outs;
    for (int s = 0; s < cfg_.stages(); ++s) {
      if (s > 0) x = merges_[std::size_t(s - 1)](t, x, g.merge[std::size_t(s)]);
      x = run_stage(t, enc_[std::size_t(s)], x, g, s);
      outs.push_back(x);
    }
    return outs;
  }

  /// Reconstruction of the full volume, flat in input order.
  Var<S> forward_pretrain(Tape<S>& t, Var<S> volume, const Index4& dims, const masking::MaskTensor* mask) {
    auto enc = encode(t, volume, dims, mask);
    const Geometry& g = geometry(dims);
    const int S_ = cfg_.stages();
    Var<S> x = enc.back();
    for (int s = S_; s-- > 0;) {
      if (s + 1 < S_) {
        x = expands_[std::size_t(S_ - 2 - s)](t, x, g.merge[std::size_t(s + 1)]);
        if (cfg_.skip_connections) x = ad::add(x, enc[std::size_t(s)]);
      }
      x = run_stage(t, dec_[std::size_t(S_ - 1 - s)], x, g, s);
    }
    auto patches = head_(t, dec_norm_(t, x));
    return ad::gather(ad::reshape(patches, {patches.size()}), g.unpatchify, {std::int64_t(g.unpatchify->size())});
  }

  /// Single logit, shape [1].
  Var<S> forward_classify(Tape<S>& t, Var<S> volume, const Index4& dims) {
    auto enc = encode(t, volume, dims);
    auto pooled = ad::mean_rows(cls_norm_(t, enc.back()));
    const std::int64_t d = pooled.size();
    return ad::reshape(cls_head_(t, ad::reshape(pooled, {1, d})), {1});
  }

 private:
  struct Block {
    Operator op;
    AttentionBlock<S> att;
    MambaBlock<S> ssm;
  };
  using Stage = std::vector<Block>;

  Stage make_stage(Init<S>& init, const std::string& name, int s, const std::vector<Operator>& ops) {
    Stage stage;
    const int dim = cfg_.stage_dim(s);
    for (std::size_t b = 0; b < ops.size(); ++b) {
      Block blk;
      blk.op = ops[b];
      const std::string bn = name + ".b" + std::to_string(b);
      if (blk.op == Operator::Attention)
        blk.att = AttentionBlock<S>(init, bn, dim, cfg_.heads, cfg_.mlp_ratio);
      else
        blk.ssm = MambaBlock<S>(init, bn, dim, cfg_.ssm_state_dim, cfg_.ssm_expand);
      stage.push_back(std::move(blk));
    }
    return stage;
  }

  Var<S> run_stage(Tape<S>& t, const Stage& stage, Var<S> x, const Geometry& g, int s) {
    int n_att = 0;
    for (const auto& blk : stage) {
      if (blk.op == Operator::Attention) {
        const bool shifted = (n_att++ % 2) == 1;
        const auto& layout = shifted ? g.shifted[std::size_t(s)] : g.plain[std::size_t(s)];
        x = blk.att(t, x, layout);
      } else {
        x = blk.ssm(t, x, g.scan[std::size_t(s)]);
      }
    }
    return x;
  }

  ModelConfig cfg_;
  OperatorLayout layout_;
  ParameterStore<S> params_;
  Linear<S> embed_, head_, cls_head_;
  Parameter<S>* mask_token_ = nullptr;
  std::vector<Stage> enc_, dec_;
  std::vector<PatchMerge<S>> merges_;
  std::vector<PatchExpand<S>> expands_;
  LayerNorm<S> dec_norm_, cls_norm_;
  std::optional<Geometry> geom_;
};

}  // namespace regmae::model
