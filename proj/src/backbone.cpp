#include "max360iq/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "max360iq/errors.hpp"

namespace max360iq {

namespace {

using Index = std::shared_ptr<const std::vector<std::size_t>>;

void require_nchw(const Var& x, const char* op) {
  if (x.shape().size() != 4)
    throw PreconditionError(std::string(op) + ": expected NCHW, got " + shape_str(x.shape()));
}

// Position (y, x) of element e inside window/group w, for either layout.
struct PartitionGeometry {
  std::size_t N, C, H, W, P;
  bool grid;

  std::size_t windows_per_image() const { return (H / P) * (W / P); }

  // Source offset in NCHW for window w (global), token t, channel c.
  std::size_t source(std::size_t w, std::size_t t, std::size_t c) const {
    const std::size_t per = windows_per_image();
    const std::size_t n = w / per, local = w % per;
    const std::size_t wy = local / (W / P), wx = local % (W / P);
    const std::size_t ty = t / P, tx = t % P;
    std::size_t y, x;
    if (grid) {
      y = ty * (H / P) + wy;
      x = tx * (W / P) + wx;
    } else {
      y = wy * P + ty;
      x = wx * P + tx;
    }
    return ((n * C + c) * H + y) * W + x;
  }
};

PartitionGeometry geometry(const Shape& s, std::size_t P, bool grid, const char* op) {
  if (s.size() != 4) throw PreconditionError(std::string(op) + ": expected NCHW shape");
  if (P == 0 || s[2] % P != 0 || s[3] % P != 0)
    throw PreconditionError(std::string(op) + ": window " + std::to_string(P) +
                            " does not divide " + shape_str(s));
  return {s[0], s[1], s[2], s[3], P, grid};
}

Var partition(const Var& x, std::size_t P, bool grid) {
  require_nchw(x, grid ? "grid_partition" : "block_partition");
  const PartitionGeometry g = geometry(x.shape(), P, grid, "partition");
  const std::size_t nw = g.N * g.windows_per_image(), T = P * P;
  auto idx = std::make_shared<std::vector<std::size_t>>(nw * T * g.C);
  for (std::size_t w = 0; w < nw; ++w)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < g.C; ++c) (*idx)[(w * T + t) * g.C + c] = g.source(w, t, c);
  return nd::gather(x, idx, {nw, T, g.C});
}

Var unpartition(const Var& windows, const Shape& nchw, std::size_t P, bool grid) {
  const PartitionGeometry g = geometry(nchw, P, grid, "unpartition");
  const std::size_t nw = g.N * g.windows_per_image(), T = P * P;
  if (windows.shape() != Shape{nw, T, g.C})
    throw PreconditionError("unpartition: windows " + shape_str(windows.shape()) +
                            " do not match " + shape_str(nchw));
  auto idx = std::make_shared<std::vector<std::size_t>>(shape_numel(nchw));
  for (std::size_t w = 0; w < nw; ++w)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < g.C; ++c) (*idx)[g.source(w, t, c)] = (w * T + t) * g.C + c;
  return nd::gather(windows, idx, nchw);
}

// [B,T,C] -> [B*h, T, C/h]
Var split_heads(const Var& x, std::size_t heads) {
  const std::size_t B = x.shape()[0], T = x.shape()[1], C = x.shape()[2];
  const std::size_t dh = C / heads;
  auto idx = std::make_shared<std::vector<std::size_t>>(B * T * C);
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t d = 0; d < dh; ++d) (*idx)[o++] = (b * T + t) * C + h * dh + d;
  return nd::gather(x, idx, {B * heads, T, dh});
}

// [B*h, T, dh] -> [B, T, h*dh]
Var merge_heads(const Var& x, std::size_t heads) {
  const std::size_t BH = x.shape()[0], T = x.shape()[1], dh = x.shape()[2];
  const std::size_t B = BH / heads, C = heads * dh;
  auto idx = std::make_shared<std::vector<std::size_t>>(B * T * C);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t d = 0; d < dh; ++d)
          (*idx)[(b * T + t) * C + h * dh + d] = ((b * heads + h) * T + t) * dh + d;
  return nd::gather(x, idx, {B, T, C});
}

// Table [(2P-1)^2, heads] -> [heads, T, T]
Var relative_bias(const Var& table, std::size_t P, std::size_t heads) {
  const std::size_t T = P * P, span = 2 * P - 1;
  auto idx = std::make_shared<std::vector<std::size_t>>(heads * T * T);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t a = 0; a < T; ++a)
      for (std::size_t b = 0; b < T; ++b) {
        const std::size_t dy = a / P + P - 1 - b / P;
        const std::size_t dx = a % P + P - 1 - b % P;
        (*idx)[(h * T + a) * T + b] = (dy * span + dx) * heads + h;
      }
  return nd::gather(table, idx, {heads, T, T});
}

Var batch_norm(const Var& x, ParamStore& ps, const std::string& p, bool train) {
  nd::BatchNormOptions opt;
  opt.train = train;
  return nd::batch_norm2d(x, ps.var(p + ".gamma"), ps.var(p + ".beta"),
                          ps.at(p + ".running_mean").value, ps.at(p + ".running_var").value,
                          opt);
}

void add_batch_norm(ParamStore& ps, const std::string& p, std::size_t C) {
  ps.add(p + ".gamma", ParamKind::NormScale, Tensor({C}, 1.0));
  ps.add(p + ".beta", ParamKind::NormScale, Tensor({C}, 0.0));
  ps.add(p + ".running_mean", ParamKind::Buffer, Tensor({C}, 0.0));
  ps.add(p + ".running_var", ParamKind::Buffer, Tensor({C}, 1.0));
}

void add_layer_norm(ParamStore& ps, const std::string& p, std::size_t C) {
  ps.add(p + ".gamma", ParamKind::NormScale, Tensor({C}, 1.0));
  ps.add(p + ".beta", ParamKind::NormScale, Tensor({C}, 0.0));
}

void add_linear(ParamStore& ps, const std::string& p, std::size_t din, std::size_t dout,
                Rng& rng) {
  ps.add(p + ".w", ParamKind::Weight, init_weight({dout, din}, din, rng));
  ps.add(p + ".b", ParamKind::Bias, Tensor({dout}, 0.0));
}

std::size_t expanded(std::size_t cout, double expansion) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cout * expansion)));
}

std::string stage_block(std::size_t s, std::size_t b) {
  return "backbone.stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
}

}  // namespace

Tensor init_weight(const Shape& shape, std::size_t fan_in, Rng& rng) {
  Tensor t(shape);
  const double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.data()) v = rng.truncated_normal(std);
  return t;
}

void BackboneConfig::validate(std::size_t viewport_size) const {
  if (stem_channels == 0 || window == 0 || heads == 0)
    throw PreconditionError("backbone: stem_channels, window and heads must be positive");
  if (!(mbconv_expansion > 0.0) || !(se_ratio > 0.0) || mlp_ratio == 0)
    throw PreconditionError("backbone: expansion, se_ratio and mlp_ratio must be positive");
  for (std::size_t i = 0; i < 4; ++i) {
    if (stage_dims[i] == 0 || stage_depths[i] == 0)
      throw PreconditionError("backbone: stage dims and depths must be positive");
    if (i > 0 && stage_dims[i] < stage_dims[i - 1])
      throw PreconditionError("backbone: stage dims must be non-decreasing");
    if (stage_dims[i] % heads != 0)
      throw PreconditionError("backbone: heads " + std::to_string(heads) + " do not divide " +
                              std::to_string(stage_dims[i]));
  }
  if (viewport_size == 0 || viewport_size % 2 != 0)
    throw PreconditionError("backbone: viewport size must be even");
  std::size_t extent = viewport_size / 2;
  for (std::size_t i = 0; i < 4; ++i) {
    if (extent % window != 0 || extent % 2 != 0)
      throw PreconditionError("backbone: stage " + std::to_string(i + 1) + " extent " +
                              std::to_string(extent) + " incompatible with window " +
                              std::to_string(window) + " and 2x2 pooling");
    extent /= 2;
  }
}

BackboneConfig BackboneConfig::full() {
  BackboneConfig c;
  c.stem_channels = 32;
  c.stage_dims = {32, 64, 128, 256};
  c.stage_depths = {2, 2, 4, 2};
  c.window = 7;
  c.heads = 8;
  return c;
}

Var block_partition(const Var& x, std::size_t P) { return partition(x, P, false); }
Var grid_partition(const Var& x, std::size_t P) { return partition(x, P, true); }
Var block_unpartition(const Var& w, const Shape& nchw, std::size_t P) {
  return unpartition(w, nchw, P, false);
}
Var grid_unpartition(const Var& g, const Shape& nchw, std::size_t P) {
  return unpartition(g, nchw, P, true);
}

void init_attention(ParamStore& ps, const std::string& p, std::size_t dim,
                    const BackboneConfig& cfg, Rng& rng) {
  const std::size_t span = 2 * cfg.window - 1;
  add_layer_norm(ps, p + ".ln1", dim);
  // No key bias: it shifts every score in a row equally and cancels in the softmax.
  add_linear(ps, p + ".q", dim, dim, rng);
  ps.add(p + ".k.w", ParamKind::Weight, init_weight({dim, dim}, dim, rng));
  add_linear(ps, p + ".v", dim, dim, rng);
  ps.add(p + ".rel_bias", ParamKind::RelBias, Tensor({span * span, cfg.heads}, 0.0));
  add_linear(ps, p + ".proj", dim, dim, rng);
  add_layer_norm(ps, p + ".ln2", dim);
  add_linear(ps, p + ".mlp1", dim, dim * cfg.mlp_ratio, rng);
  add_linear(ps, p + ".mlp2", dim * cfg.mlp_ratio, dim, rng);
}

Var window_attention(const Var& tokens, ParamStore& ps, const std::string& p,
                     const BackboneConfig& cfg, Tensor* attn_weights) {
  if (tokens.shape().size() != 3)
    throw PreconditionError("window_attention: expected [B,T,C], got " +
                            shape_str(tokens.shape()));
  const std::size_t T = tokens.shape()[1], C = tokens.shape()[2];
  if (C % cfg.heads != 0)
    throw PreconditionError("window_attention: " + std::to_string(cfg.heads) +
                            " heads do not divide dim " + std::to_string(C));
  if (T != cfg.window * cfg.window)
    throw PreconditionError("window_attention: window holds " + std::to_string(T) +
                            " tokens, expected " + std::to_string(cfg.window * cfg.window));
  const std::size_t dh = C / cfg.heads;

  Var y = nd::layer_norm(tokens, ps.var(p + ".ln1.gamma"), ps.var(p + ".ln1.beta"));
  Var q = split_heads(nd::linear(y, ps.var(p + ".q.w"), ps.var(p + ".q.b")), cfg.heads);
  Var k = split_heads(nd::linear(y, ps.var(p + ".k.w"), Var()), cfg.heads);
  Var v = split_heads(nd::linear(y, ps.var(p + ".v.w"), ps.var(p + ".v.b")), cfg.heads);
  Var scores = nd::scale(nd::matmul_bt(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
  scores = nd::add_tiled(scores, relative_bias(ps.var(p + ".rel_bias"), cfg.window, cfg.heads));
  Var attn = nd::softmax(scores, 2);
  if (attn_weights) *attn_weights = attn.value();
  Var mixed = merge_heads(nd::matmul(attn, v), cfg.heads);
  Var x = nd::add(tokens, nd::linear(mixed, ps.var(p + ".proj.w"), ps.var(p + ".proj.b")));

  Var z = nd::layer_norm(x, ps.var(p + ".ln2.gamma"), ps.var(p + ".ln2.beta"));
  z = nd::gelu(nd::linear(z, ps.var(p + ".mlp1.w"), ps.var(p + ".mlp1.b")));
  z = nd::linear(z, ps.var(p + ".mlp2.w"), ps.var(p + ".mlp2.b"));
  return nd::add(x, z);
}

void init_mbconv(ParamStore& ps, const std::string& p, std::size_t cin, std::size_t cout,
                 const BackboneConfig& cfg, Rng& rng) {
  const std::size_t mid = expanded(cout, cfg.mbconv_expansion);
  const std::size_t se = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(static_cast<double>(mid) * cfg.se_ratio)));
  add_batch_norm(ps, p + ".pre_bn", cin);
  ps.add(p + ".expand.w", ParamKind::Weight, init_weight({mid, cin, 1, 1}, cin, rng));
  add_batch_norm(ps, p + ".expand_bn", mid);
  ps.add(p + ".dw.w", ParamKind::Weight, init_weight({mid, 1, 3, 3}, 9, rng));
  add_batch_norm(ps, p + ".dw_bn", mid);
  add_linear(ps, p + ".se1", mid, se, rng);
  add_linear(ps, p + ".se2", se, mid, rng);
  ps.add(p + ".project.w", ParamKind::Weight, init_weight({cout, mid, 1, 1}, mid, rng));
  ps.add(p + ".project.b", ParamKind::Bias, Tensor({cout}, 0.0));
  if (cin != cout) {
    ps.add(p + ".shortcut.w", ParamKind::Weight, init_weight({cout, cin, 1, 1}, cin, rng));
    ps.add(p + ".shortcut.b", ParamKind::Bias, Tensor({cout}, 0.0));
  }
}

Var mbconv_forward(const Var& x, ParamStore& ps, const std::string& p, std::size_t cin,
                   std::size_t cout, bool train) {
  require_nchw(x, "mbconv");
  if (x.shape()[1] != cin)
    throw PreconditionError("mbconv: expected " + std::to_string(cin) + " channels, got " +
                            shape_str(x.shape()));
  Var y = batch_norm(x, ps, p + ".pre_bn", train);
  y = nd::conv2d(y, ps.var(p + ".expand.w"), Var(), 1, 0);
  y = nd::gelu(batch_norm(y, ps, p + ".expand_bn", train));
  y = nd::depthwise_conv2d(y, ps.var(p + ".dw.w"), Var(), 1, 1);
  y = nd::gelu(batch_norm(y, ps, p + ".dw_bn", train));
  y = nd::squeeze_excite(y, ps.var(p + ".se1.w"), ps.var(p + ".se1.b"), ps.var(p + ".se2.w"),
                         ps.var(p + ".se2.b"));
  y = nd::conv2d(y, ps.var(p + ".project.w"), ps.var(p + ".project.b"), 1, 0);
  Var skip = x;
  if (cin != cout)
    skip = nd::conv2d(x, ps.var(p + ".shortcut.w"), ps.var(p + ".shortcut.b"), 1, 0);
  return nd::add(skip, y);
}

void init_maxvit_block(ParamStore& ps, const std::string& p, std::size_t cin, std::size_t cout,
                       const BackboneConfig& cfg, Rng& rng) {
  init_mbconv(ps, p + ".mbconv", cin, cout, cfg, rng);
  init_attention(ps, p + ".block_attn", cout, cfg, rng);
  init_attention(ps, p + ".grid_attn", cout, cfg, rng);
}

Var maxvit_block_forward(const Var& x, ParamStore& ps, const std::string& p, std::size_t cin,
                         std::size_t cout, const BackboneConfig& cfg, bool train) {
  Var y = mbconv_forward(x, ps, p + ".mbconv", cin, cout, train);
  const Shape s = y.shape();
  y = block_unpartition(
      window_attention(block_partition(y, cfg.window), ps, p + ".block_attn", cfg), s,
      cfg.window);
  y = grid_unpartition(
      window_attention(grid_partition(y, cfg.window), ps, p + ".grid_attn", cfg), s,
      cfg.window);
  return y;
}

Var stem_forward(const Var& x, ParamStore& ps, const BackboneConfig& cfg, bool train) {
  require_nchw(x, "stem");
  if (x.shape()[1] != 3) throw PreconditionError("stem: expected 3 input channels");
  if (x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0)
    throw PreconditionError("stem: viewport extent must be even, got " + shape_str(x.shape()));
  (void)cfg;
  Var y = nd::conv2d(x, ps.var("backbone.stem.conv1.w"), Var(), 2, 1);
  y = nd::gelu(batch_norm(y, ps, "backbone.stem.bn1", train));
  return nd::conv2d(y, ps.var("backbone.stem.conv2.w"), ps.var("backbone.stem.conv2.b"), 1, 1);
}

void init_backbone(ParamStore& ps, const BackboneConfig& cfg, Rng& rng) {
  const std::size_t sc = cfg.stem_channels;
  ps.add("backbone.stem.conv1.w", ParamKind::Weight, init_weight({sc, 3, 3, 3}, 27, rng));
  add_batch_norm(ps, "backbone.stem.bn1", sc);
  ps.add("backbone.stem.conv2.w", ParamKind::Weight, init_weight({sc, sc, 3, 3}, sc * 9, rng));
  ps.add("backbone.stem.conv2.b", ParamKind::Bias, Tensor({sc}, 0.0));
  std::size_t cin = sc;
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t b = 0; b < cfg.stage_depths[s]; ++b) {
      init_maxvit_block(ps, stage_block(s, b), cin, cfg.stage_dims[s], cfg, rng);
      cin = cfg.stage_dims[s];
    }
}

FeaturePyramid backbone_forward(const Var& viewports, ParamStore& ps, const BackboneConfig& cfg,
                                bool train) {
  require_nchw(viewports, "backbone");
  if (viewports.shape()[2] != viewports.shape()[3])
    throw PreconditionError("backbone: viewports must be square");
  cfg.validate(viewports.shape()[2]);
  FeaturePyramid pyr;
  Var y = stem_forward(viewports, ps, cfg, train);
  std::size_t cin = cfg.stem_channels;
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t b = 0; b < cfg.stage_depths[s]; ++b) {
      y = maxvit_block_forward(y, ps, stage_block(s, b), cin, cfg.stage_dims[s], cfg, train);
      cin = cfg.stage_dims[s];
    }
    y = nd::max_pool2d(y);
    pyr.F[s] = y;
  }
  return pyr;
}

}  // namespace max360iq
