#pragma once

#include <span>
#include <string>
#include <vector>

#include "max360iq/ops.hpp"

namespace max360iq {

enum class LossKind { NormInNorm, Mae, Mse };

std::string loss_name(LossKind k);
LossKind parse_loss(const std::string& name);  // throws PreconditionError

struct LossConfig {
  LossKind kind = LossKind::NormInNorm;
  double p = 1.0;
  double q = 2.0;
  double sigma_floor = 1e-12;

  void validate() const;
};

struct NormalizedScores {
  std::vector<double> values;
  double mu = 0.0;
  double sigma = 0.0;
};

// (s - mean) / (sum |s - mean|^q)^(1/q). Throws DegenerateInputError when
// sigma <= floor; `what` names the batch in the message.
NormalizedScores normalize_scores(std::span<const double> s, double q, double sigma_floor = 1e-12,
                                  const std::string& what = "batch");
ad::Var normalize_scores(const ad::Var& s, double q, double sigma_floor = 1e-12,
                         const std::string& what = "batch");

// (1/eps) * sum |norm(pred) - norm(mos)|^p, eps = 2^p * N^(1 - p/q).
// Lies in [0,1] for p = 1, q = 2.
ad::Var norm_in_norm_loss(const ad::Var& pred, const ad::Var& mos, const LossConfig& cfg,
                          const std::string& what = "batch");
ad::Var mae_loss(const ad::Var& pred, const ad::Var& mos);
ad::Var mse_loss(const ad::Var& pred, const ad::Var& mos);

// Dispatches on cfg.kind. pred and mos are 1-D of equal length.
ad::Var quality_loss(const ad::Var& pred, const ad::Var& mos, const LossConfig& cfg,
                     const std::string& what = "batch");

}  // namespace max360iq
