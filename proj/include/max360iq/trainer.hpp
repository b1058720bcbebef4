#pragma once
// Adam with decoupled weight decay, the training loop, checkpoints and
// batched prediction.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "max360iq/config.hpp"
#include "max360iq/data.hpp"
#include "max360iq/model.hpp"

namespace max360iq {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// First and second moments per trainable entry, keyed by parameter name.
struct AdamState {
  std::uint64_t step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

// One update from the gradients held in `ps`. Weight decay is decoupled
// (theta -= lr * wd * theta) and applies to ParamKind::Weight entries only.
void adam_step(ParamStore& ps, AdamState& state, const AdamOptions& opt);

struct Checkpoint {
  RunConfig config;
  ParamStore params;
  AdamState adam;
  std::string rng_state;
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double val_srcc = 0.0;
};

inline constexpr char kCheckpointMagic[8] = {'M', '3', '6', '0', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointSchema = 1;

// Layout (little-endian): 8-byte magic, u32 schema, u64 JSON length, JSON
// block (config, rng state, counters), u32 tensor count, then per tensor:
// u32 name length, name, u8 kind, u32 rank, u64 extents, f64 values.
// Adam moments are stored as "adam.m/<name>" and "adam.v/<name>".
std::string serialize_checkpoint(const Checkpoint& c);
Checkpoint deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TrainResult {
  Checkpoint last;
  Checkpoint best;  // highest validation SRCC (last if no validation set)
  std::vector<nlohmann::json> log;  // one record per epoch
  std::vector<std::string> warnings;
};

// Called after every epoch with the log record; may be empty.
using EpochCallback = std::function<void(const nlohmann::json&)>;

// Samples are sequences with labels. Batches of config.train.batch_size
// sequences are drawn in a seeded shuffled order each epoch; a trailing batch
// with fewer than 2 sequences is dropped. Batches with constant labels are
// skipped with a warning.
TrainResult train(const RunConfig& config, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set, const EpochCallback& on_epoch = {});

// Eval mode. Scores per sample, computed in chunks of `batch` sequences;
// results do not depend on the chunk size.
std::vector<double> predict(Model& model, const std::vector<Sample>& samples, std::size_t batch = 16,
                            std::size_t threads = 1);

struct ImageScore {
  std::string image_id;
  double score = 0.0;
  std::size_t sequences = 0;
};
// Mean of the sequence scores of each image, in first-seen order.
std::vector<ImageScore> aggregate_by_image(const std::vector<Sample>& samples,
                                           const std::vector<double>& scores);

Tensor stack_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& idx);

}  // namespace max360iq
