#pragma once
// Run configuration: model architecture, training hyperparameters and data
// handling in one JSON document. Parsing is strict (unknown keys rejected).

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "max360iq/data.hpp"
#include "max360iq/model.hpp"
#include "max360iq/objective.hpp"

namespace max360iq {

enum class LrSchedule { Constant, Cosine };

struct TrainConfig {
  double lr = 1e-4;
  // Cosine: lr * (1 + cos(pi * step / total)) / 2 over the run's planned steps.
  LrSchedule lr_schedule = LrSchedule::Constant;
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 16;
  std::size_t epochs = 10;
  std::size_t max_steps = 0;  // 0 = no cap
  double dropout = 0.1;
  bool use_gru = true;
  bool use_msfi = true;
  bool use_dsg = true;
  std::size_t K = 7;
  std::uint64_t seed = 0;
  LossConfig loss;

  void validate() const;
  // Planned optimizer steps for `n_train` sequences (epochs, batching, max_steps).
  std::size_t planned_steps(std::size_t n_train) const;
  double lr_at(std::uint64_t step, std::size_t total) const;
};

struct RunConfig {
  BackboneConfig backbone;
  HeadConfig head;  // sizes only; toggles and dropout come from `train`
  std::size_t viewport_size = 32;
  double fov_deg = 90.0;
  TrainConfig train;
  double split_ratio = 0.8;
  std::uint64_t split_seed = 0;
  SequenceMode sequences = SequenceMode::Scanpath;

  void validate() const;
  ModelConfig model() const;
  ExtractOptions extract() const;
};

nlohmann::json to_json(const RunConfig& c);
nlohmann::json to_json(const ModelConfig& c);
// Strict: every key must be known; missing keys keep their defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
ModelConfig model_config_from_json(const nlohmann::json& j);

// "train.lr=1e-3" style overrides. Values parse as JSON when possible,
// otherwise as a string. The key must already exist in the config.
RunConfig apply_overrides(const RunConfig& base, const std::vector<std::string>& overrides);

RunConfig load_run_config(const std::string& path);

}  // namespace max360iq
