#include "max360iq/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <thread>

#include "max360iq/errors.hpp"
#include "max360iq/evaluation.hpp"
#include "max360iq/image_io.hpp"

namespace max360iq {

using nlohmann::json;

void adam_step(ParamStore& ps, AdamState& st, const AdamOptions& o) {
  ++st.step;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(st.step));
  for (auto& e : ps) {
    if (!e->trainable()) continue;
    Tensor& m = st.m.try_emplace(e->name, e->value.shape()).first->second;
    Tensor& v = st.v.try_emplace(e->name, e->value.shape()).first->second;
    if (m.shape() != e->value.shape() || v.shape() != e->value.shape())
      throw PreconditionError("adam: moment shape mismatch for " + e->name);
    const double decay = e->decays() ? o.lr * o.weight_decay : 0.0;
    double* w = e->value.ptr();
    const double* g = e->grad.ptr();
    for (std::size_t i = 0; i < e->value.numel(); ++i) {
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
      const double mh = m[i] / bc1, vh = v[i] / bc2;
      w[i] -= o.lr * mh / (std::sqrt(vh) + o.eps) + decay * w[i];
    }
  }
}

// ---- checkpoint container -------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& b) : b_(b) {}
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw DataError("checkpoint truncated");
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

void put_tensor(std::string& out, const std::string& name, ParamKind kind, const Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put<std::uint8_t>(out, static_cast<std::uint8_t>(kind));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
  out.append(reinterpret_cast<const char*>(t.ptr()), t.numel() * sizeof(double));
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  put<std::uint32_t>(out, kCheckpointSchema);
  json meta{{"config", to_json(c.config)},
            {"rng_state", c.rng_state},
            {"epoch", c.epoch},
            {"step", c.step},
            {"adam_step", c.adam.step},
            {"val_srcc", c.val_srcc}};
  const std::string js = meta.dump();
  put<std::uint64_t>(out, js.size());
  out += js;
  std::uint32_t count = static_cast<std::uint32_t>(c.params.size() + c.adam.m.size() + c.adam.v.size());
  put<std::uint32_t>(out, count);
  for (const auto& e : c.params) put_tensor(out, e->name, e->kind, e->value);
  for (const auto& [name, t] : c.adam.m) put_tensor(out, "adam.m/" + name, ParamKind::Buffer, t);
  for (const auto& [name, t] : c.adam.v) put_tensor(out, "adam.v/" + name, ParamKind::Buffer, t);
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  ByteReader r(bytes);
  if (r.bytes(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic))
    throw DataError("not a checkpoint (bad magic)");
  const auto schema = r.get<std::uint32_t>();
  if (schema != kCheckpointSchema) throw DataError("unsupported checkpoint schema " + std::to_string(schema));
  const auto jlen = r.get<std::uint64_t>();
  const json meta = json::parse(r.bytes(jlen), nullptr, false);
  if (meta.is_discarded()) throw DataError("checkpoint metadata is not valid JSON");
  Checkpoint c;
  c.config = run_config_from_json(meta.at("config"));
  c.rng_state = meta.at("rng_state").get<std::string>();
  c.epoch = meta.at("epoch").get<std::size_t>();
  c.step = meta.at("step").get<std::uint64_t>();
  c.adam.step = meta.at("adam_step").get<std::uint64_t>();
  c.val_srcc = meta.at("val_srcc").get<double>();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.bytes(r.get<std::uint32_t>());
    const auto kind = static_cast<ParamKind>(r.get<std::uint8_t>());
    if (kind > ParamKind::Buffer) throw DataError("checkpoint: bad kind for " + name);
    Shape shape(r.get<std::uint32_t>());
    for (std::size_t& d : shape) d = r.get<std::uint64_t>();
    Tensor t(shape);
    const std::string raw = r.bytes(t.numel() * sizeof(double));
    std::memcpy(t.ptr(), raw.data(), raw.size());
    if (name.rfind("adam.m/", 0) == 0) c.adam.m.emplace(name.substr(7), std::move(t));
    else if (name.rfind("adam.v/", 0) == 0) c.adam.v.emplace(name.substr(7), std::move(t));
    else c.params.add(name, kind, std::move(t));
  }
  if (!r.done()) throw DataError("checkpoint has trailing bytes");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_file_atomic(path, serialize_checkpoint(c));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

// ---- training ---------------------------------------------------------------

Tensor stack_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw PreconditionError("empty batch");
  const Shape& s = samples.at(idx[0]).viewports.shape();
  Shape shape{idx.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  Tensor out(shape);
  const std::size_t per = shape_numel(s);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Tensor& v = samples.at(idx[b]).viewports;
    if (v.shape() != s)
      throw PreconditionError("batch: sample shape " + shape_str(v.shape()) + " differs from " + shape_str(s));
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + b * per);
  }
  return out;
}

namespace {

json validation_metrics(Model& model, const std::vector<Sample>& val, std::vector<std::string>& warnings) {
  json j{{"val_srcc", nullptr}, {"val_plcc", nullptr}, {"val_rmse", nullptr}};
  if (val.size() < 5) return j;
  std::vector<double> mos;
  for (const Sample& s : val) mos.push_back(s.label);
  try {
    const EvalReport r = evaluate(predict(model, val), mos);
    j["val_srcc"] = r.srcc;
    j["val_plcc"] = r.plcc;
    j["val_rmse"] = r.rmse;
  } catch (const DegenerateInputError& e) {
    warnings.push_back(std::string("validation skipped: ") + e.what());
  }
  return j;
}

std::string rng_states(const Rng& shuffle, const Rng& dropout) {
  return json{{"shuffle", shuffle.state()}, {"dropout", dropout.state()}}.dump();
}

}  // namespace

TrainResult train(const RunConfig& config, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set, const EpochCallback& on_epoch) {
  config.validate();
  const TrainConfig& tc = config.train;
  if (train_set.size() < 2) throw DataError("training set needs at least 2 sequences");
  const std::size_t K = train_set.front().viewports.dim(0);

  Model model(config.model(), tc.seed);
  AdamState adam;
  AdamOptions opt{tc.lr, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay};
  const std::size_t planned = tc.planned_steps(train_set.size());
  Rng shuffle_rng = Rng::derive(tc.seed, 0x5A1F);
  Rng dropout_rng = Rng::derive(tc.seed, 0xD409);

  TrainResult res;
  auto snapshot = [&](std::size_t epoch, std::uint64_t step, double srcc) {
    Checkpoint c;
    c.config = config;
    c.config.train.K = K;
    c.params = model.params();
    c.adam = adam;
    c.rng_state = rng_states(shuffle_rng, dropout_rng);
    c.epoch = epoch;
    c.step = step;
    c.val_srcc = srcc;
    return c;
  };

  std::uint64_t step = 0;
  bool have_best = false;
  double best_srcc = -2.0;
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_rng.shuffle(order);
    double loss_sum = 0;
    std::size_t batches = 0, skipped = 0;
    bool capped = false;
    for (std::size_t start = 0; start + 2 <= order.size(); start += tc.batch_size) {
      if (tc.max_steps && step >= tc.max_steps) {
        capped = true;
        break;
      }
      const std::vector<std::size_t> idx(order.begin() + start,
                                         order.begin() + std::min(order.size(), start + tc.batch_size));
      std::vector<double> labels;
      for (std::size_t i : idx) labels.push_back(train_set[i].label);
      if (std::all_of(labels.begin(), labels.end(), [&](double v) { return v == labels[0]; })) {
        ++skipped;
        res.warnings.push_back("epoch " + std::to_string(epoch) + ": batch at " + std::to_string(start) +
                               " has constant labels, skipped");
        continue;
      }
      const Var x = ad::constant(stack_batch(train_set, idx));
      const Var y = ad::constant(Tensor::vector(labels));
      const Var pred = model.sequence_scores(x, true, dropout_rng);
      const Var loss = quality_loss(pred, y, tc.loss,
                                    "epoch " + std::to_string(epoch) + " batch " + std::to_string(batches));
      if (!std::isfinite(loss.item())) throw NumericError("non-finite loss at step " + std::to_string(step));
      model.params().zero_grad();
      ad::backward(loss);
      opt.lr = tc.lr_at(step, planned);
      adam_step(model.params(), adam, opt);
      loss_sum += loss.item();
      ++batches;
      ++step;
    }
    json rec{{"epoch", epoch},
             {"step", step},
             {"train_loss", batches ? json(loss_sum / static_cast<double>(batches)) : json(nullptr)},
             {"lr", opt.lr},
             {"batches", batches},
             {"skipped_batches", skipped}};
    const json val = validation_metrics(model, val_set, res.warnings);
    rec.update(val);
    res.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
    const double srcc = val["val_srcc"].is_number() ? val["val_srcc"].get<double>() : -2.0;
    if (!have_best || srcc > best_srcc) {
      res.best = snapshot(epoch, step, srcc);
      best_srcc = srcc;
      have_best = true;
    }
    res.last = snapshot(epoch, step, srcc);
    if (capped || (tc.max_steps && step >= tc.max_steps)) break;
  }
  if (!have_best) res.best = res.last = snapshot(0, step, -2.0);
  return res;
}

std::vector<double> predict(Model& model, const std::vector<Sample>& samples, std::size_t batch,
                            std::size_t threads) {
  if (batch == 0) throw PreconditionError("predict: batch size must be >= 1");
  std::vector<double> out(samples.size());
  const std::size_t chunks = (samples.size() + batch - 1) / batch;
  auto run_chunk = [&](Model& m, std::size_t c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = c * batch; i < std::min(samples.size(), (c + 1) * batch); ++i) idx.push_back(i);
    const std::vector<double> s = m.predict_sequences(stack_batch(samples, idx));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (!std::isfinite(s[k])) throw NumericError("non-finite prediction for " + samples[idx[k]].image_id);
      out[idx[k]] = s[k];
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, chunks));
  if (threads == 1) {
    for (std::size_t c = 0; c < chunks; ++c) run_chunk(model, c);
    return out;
  }
  // Each worker owns a model copy; chunks are assigned round-robin.
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        Model local = model;
        for (std::size_t c = t; c < chunks; c += threads) run_chunk(local, c);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

std::vector<ImageScore> aggregate_by_image(const std::vector<Sample>& samples, const std::vector<double>& scores) {
  if (samples.size() != scores.size()) throw PreconditionError("aggregate: score count mismatch");
  std::vector<ImageScore> out;
  std::map<std::string, std::size_t> where;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto [it, fresh] = where.try_emplace(samples[i].image_id, out.size());
    if (fresh) out.push_back({samples[i].image_id, 0.0, 0});
    out[it->second].score += scores[i];
    ++out[it->second].sequences;
  }
  for (ImageScore& s : out) s.score /= static_cast<double>(s.sequences);
  return out;
}

}  // namespace max360iq
