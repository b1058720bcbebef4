#include "max360iq/objective.hpp"

#include <cmath>
#include <numeric>

#include "max360iq/errors.hpp"

namespace max360iq {

using ad::Var;

namespace {

void require_pair(const Var& pred, const Var& mos, std::size_t min_n) {
  if (pred.shape().size() != 1 || pred.shape() != mos.shape())
    throw PreconditionError("loss: pred " + shape_str(pred.shape()) + " and mos " +
                            shape_str(mos.shape()) + " must be equal-length vectors");
  if (pred.numel() < min_n)
    throw PreconditionError("loss: needs at least " + std::to_string(min_n) + " scores");
}

bool even_integer(double q) { return std::floor(q) == q && std::fmod(q, 2.0) == 0.0; }

// |x|^q, kept smooth where possible
Var abs_pow(const Var& x, double q) {
  return even_integer(q) ? nd::pow(x, q) : nd::pow(nd::abs(x), q);
}

double centered_norm(std::span<const double> s, double mu, double q) {
  double acc = 0.0;
  for (double v : s) acc += std::pow(std::abs(v - mu), q);
  return std::pow(acc, 1.0 / q);
}

}  // namespace

std::string loss_name(LossKind k) {
  switch (k) {
    case LossKind::NormInNorm: return "norm_in_norm";
    case LossKind::Mae: return "mae";
    case LossKind::Mse: return "mse";
  }
  return "?";
}

LossKind parse_loss(const std::string& name) {
  for (LossKind k : {LossKind::NormInNorm, LossKind::Mae, LossKind::Mse})
    if (loss_name(k) == name) return k;
  throw PreconditionError("unknown loss '" + name + "' (norm_in_norm, mae, mse)");
}

void LossConfig::validate() const {
  if (!(p >= 1.0) || !(q >= 1.0)) throw PreconditionError("loss: p and q must be >= 1");
  if (!(sigma_floor >= 0.0)) throw PreconditionError("loss: sigma_floor must be >= 0");
}

NormalizedScores normalize_scores(std::span<const double> s, double q, double sigma_floor,
                                  const std::string& what) {
  if (s.size() < 2) throw PreconditionError("normalize_scores: needs at least 2 scores");
  if (!(q >= 1.0)) throw PreconditionError("normalize_scores: q must be >= 1");
  NormalizedScores out;
  out.mu = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
  out.sigma = centered_norm(s, out.mu, q);
  if (!(out.sigma > sigma_floor))
    throw DegenerateInputError("constant scores in " + what + " (sigma " +
                               std::to_string(out.sigma) + ")");
  for (double v : s) out.values.push_back((v - out.mu) / out.sigma);
  return out;
}

Var normalize_scores(const Var& s, double q, double sigma_floor, const std::string& what) {
  if (s.shape().size() != 1 || s.numel() < 2)
    throw PreconditionError("normalize_scores: needs a vector of at least 2 scores");
  if (!(q >= 1.0)) throw PreconditionError("normalize_scores: q must be >= 1");
  const auto vals = s.value().data();
  const double mu = std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
  const double sigma = centered_norm(vals, mu, q);
  if (!(sigma > sigma_floor))
    throw DegenerateInputError("constant scores in " + what + " (sigma " + std::to_string(sigma) +
                               ")");
  Var centered = nd::add_tiled(s, nd::scale(nd::mean(s), -1.0));
  Var norm = nd::pow(nd::sum(abs_pow(centered, q)), 1.0 / q);
  return nd::mul_tiled(centered, nd::pow(norm, -1.0));
}

Var norm_in_norm_loss(const Var& pred, const Var& mos, const LossConfig& cfg,
                      const std::string& what) {
  cfg.validate();
  require_pair(pred, mos, 2);
  const double n = static_cast<double>(pred.numel());
  const double eps = std::pow(2.0, cfg.p) * n / std::pow(n, cfg.p / cfg.q);
  Var a = normalize_scores(pred, cfg.q, cfg.sigma_floor, "predictions of " + what);
  Var b = normalize_scores(mos, cfg.q, cfg.sigma_floor, "labels of " + what);
  return nd::scale(nd::sum(abs_pow(nd::sub(a, b), cfg.p)), 1.0 / eps);
}

Var mae_loss(const Var& pred, const Var& mos) {
  require_pair(pred, mos, 1);
  return nd::mean(nd::abs(nd::sub(pred, mos)));
}

Var mse_loss(const Var& pred, const Var& mos) {
  require_pair(pred, mos, 1);
  return nd::mean(nd::pow(nd::sub(pred, mos), 2.0));
}

Var quality_loss(const Var& pred, const Var& mos, const LossConfig& cfg, const std::string& what) {
  switch (cfg.kind) {
    case LossKind::NormInNorm: return norm_in_norm_loss(pred, mos, cfg, what);
    case LossKind::Mae: return mae_loss(pred, mos);
    case LossKind::Mse: return mse_loss(pred, mos);
  }
  throw PreconditionError("loss: unknown kind");
}

}  // namespace max360iq
