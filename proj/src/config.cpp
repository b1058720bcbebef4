#include "max360iq/config.hpp"

#include <cmath>
#include <set>

#include "max360iq/errors.hpp"
#include "max360iq/image_io.hpp"

namespace max360iq {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw PreconditionError("train.lr must be > 0");
  if (!(weight_decay >= 0.0)) throw PreconditionError("train.weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw PreconditionError("train.beta1/beta2 must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw PreconditionError("train.adam_eps must be > 0");
  if (batch_size < 2) throw PreconditionError("train.batch_size must be >= 2 (the loss needs two scores)");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw PreconditionError("train.dropout must lie in [0, 1)");
  if (!use_msfi && !use_dsg) throw PreconditionError("train: at least one of use_msfi/use_dsg must be set");
  if (K < 1) throw PreconditionError("train.K must be >= 1");
  loss.validate();
}

std::size_t TrainConfig::planned_steps(std::size_t n_train) const {
  std::size_t per_epoch = 0;
  for (std::size_t start = 0; start + 2 <= n_train; start += batch_size) ++per_epoch;
  const std::size_t total = per_epoch * epochs;
  return max_steps ? std::min(total, max_steps) : total;
}

double TrainConfig::lr_at(std::uint64_t step, std::size_t total) const {
  if (lr_schedule == LrSchedule::Constant || total == 0) return lr;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return lr * 0.5 * (1.0 + std::cos(kPi * t));
}

void RunConfig::validate() const {
  train.validate();
  model().validate();
  if (!(fov_deg > 0.0 && fov_deg < 180.0)) throw PreconditionError("fov_deg must lie in (0, 180)");
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw PreconditionError("data.split_ratio must lie in (0, 1)");
}

ModelConfig RunConfig::model() const {
  ModelConfig m;
  m.backbone = backbone;
  m.head = head;
  m.head.use_gru = train.use_gru;
  m.head.use_msfi = train.use_msfi;
  m.head.use_dsg = train.use_dsg;
  m.head.dropout = train.dropout;
  m.viewport_size = viewport_size;
  return m;
}

ExtractOptions RunConfig::extract() const {
  return {train.K, fov_deg * kPi / 180.0, viewport_size};
}

namespace {

// Reads known keys from an object and rejects leftovers.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw PreconditionError("config: " + where() + " must be an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw PreconditionError("config: unknown key " + key(it.key()));
  }

  template <class T>
  void get(const std::string& k, T& out) {
    seen_.insert(k);
    if (!j_.contains(k)) return;
    try {
      const json& v = j_.at(k);
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw PreconditionError("");
      } else if constexpr (std::is_unsigned_v<T>) {
        if (!v.is_number_unsigned()) throw PreconditionError("");
      } else if constexpr (std::is_arithmetic_v<T>) {
        if (!v.is_number()) throw PreconditionError("");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      throw PreconditionError("config: bad value for " + key(k) + ": " + j_.at(k).dump());
    }
  }

  // Nested object; `fn` receives a Reader for it.
  template <class F>
  void object(const std::string& k, F&& fn) {
    seen_.insert(k);
    if (!j_.contains(k)) return;
    Reader sub(j_.at(k), key(k));
    fn(sub);
  }

  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

 private:
  std::string where() const { return path_.empty() ? "document" : path_; }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json backbone_json(const BackboneConfig& b) {
  return {{"stem_channels", b.stem_channels}, {"stage_dims", b.stage_dims},
          {"stage_depths", b.stage_depths},   {"window", b.window},
          {"heads", b.heads},                 {"mbconv_expansion", b.mbconv_expansion},
          {"se_ratio", b.se_ratio},           {"mlp_ratio", b.mlp_ratio}};
}

void read_backbone(Reader& r, BackboneConfig& b) {
  r.get("stem_channels", b.stem_channels);
  r.get("stage_dims", b.stage_dims);
  r.get("stage_depths", b.stage_depths);
  r.get("window", b.window);
  r.get("heads", b.heads);
  r.get("mbconv_expansion", b.mbconv_expansion);
  r.get("se_ratio", b.se_ratio);
  r.get("mlp_ratio", b.mlp_ratio);
}

json head_sizes_json(const HeadConfig& h) {
  return {{"gru_layers", h.gru_layers}, {"gru_hidden", h.gru_hidden},
          {"fc_hidden", h.fc_hidden},   {"fusion_dim", h.fusion_dim}};
}

void read_head_sizes(Reader& r, HeadConfig& h) {
  r.get("gru_layers", h.gru_layers);
  r.get("gru_hidden", h.gru_hidden);
  r.get("fc_hidden", h.fc_hidden);
  r.get("fusion_dim", h.fusion_dim);
}

}  // namespace

json to_json(const ModelConfig& c) {
  json h = head_sizes_json(c.head);
  h["use_gru"] = c.head.use_gru;
  h["use_msfi"] = c.head.use_msfi;
  h["use_dsg"] = c.head.use_dsg;
  h["dropout"] = c.head.dropout;
  return {{"backbone", backbone_json(c.backbone)}, {"head", h}, {"viewport_size", c.viewport_size}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  {
    Reader r(j, "model");
    r.object("backbone", [&](Reader& b) { read_backbone(b, c.backbone); });
    r.object("head", [&](Reader& h) {
      read_head_sizes(h, c.head);
      h.get("use_gru", c.head.use_gru);
      h.get("use_msfi", c.head.use_msfi);
      h.get("use_dsg", c.head.use_dsg);
      h.get("dropout", c.head.dropout);
    });
    r.get("viewport_size", c.viewport_size);
  }
  c.validate();
  return c;
}

json to_json(const RunConfig& c) {
  const TrainConfig& t = c.train;
  return {
      {"model",
       {{"backbone", backbone_json(c.backbone)},
        {"head", head_sizes_json(c.head)},
        {"viewport_size", c.viewport_size},
        {"fov_deg", c.fov_deg}}},
      {"train",
       {{"lr", t.lr},
        {"lr_schedule", t.lr_schedule == LrSchedule::Cosine ? "cosine" : "constant"},
        {"weight_decay", t.weight_decay},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"adam_eps", t.adam_eps},
        {"batch_size", t.batch_size},
        {"epochs", t.epochs},
        {"max_steps", t.max_steps},
        {"dropout", t.dropout},
        {"use_gru", t.use_gru},
        {"use_msfi", t.use_msfi},
        {"use_dsg", t.use_dsg},
        {"K", t.K},
        {"seed", t.seed},
        {"loss", {{"kind", loss_name(t.loss.kind)}, {"p", t.loss.p}, {"q", t.loss.q}}}}},
      {"data",
       {{"split_ratio", c.split_ratio},
        {"split_seed", c.split_seed},
        {"sequences", c.sequences == SequenceMode::Scanpath ? "scanpath" : "equator"}}}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  {
    Reader r(j, "");
    r.object("model", [&](Reader& m) {
      m.object("backbone", [&](Reader& b) { read_backbone(b, c.backbone); });
      m.object("head", [&](Reader& h) { read_head_sizes(h, c.head); });
      m.get("viewport_size", c.viewport_size);
      m.get("fov_deg", c.fov_deg);
    });
    r.object("train", [&](Reader& t) {
      TrainConfig& tc = c.train;
      t.get("lr", tc.lr);
      std::string sched = tc.lr_schedule == LrSchedule::Cosine ? "cosine" : "constant";
      t.get("lr_schedule", sched);
      if (sched == "constant") tc.lr_schedule = LrSchedule::Constant;
      else if (sched == "cosine") tc.lr_schedule = LrSchedule::Cosine;
      else throw PreconditionError("config: train.lr_schedule must be constant or cosine, got " + sched);
      t.get("weight_decay", tc.weight_decay);
      t.get("beta1", tc.beta1);
      t.get("beta2", tc.beta2);
      t.get("adam_eps", tc.adam_eps);
      t.get("batch_size", tc.batch_size);
      t.get("epochs", tc.epochs);
      t.get("max_steps", tc.max_steps);
      t.get("dropout", tc.dropout);
      t.get("use_gru", tc.use_gru);
      t.get("use_msfi", tc.use_msfi);
      t.get("use_dsg", tc.use_dsg);
      t.get("K", tc.K);
      t.get("seed", tc.seed);
      t.object("loss", [&](Reader& l) {
        std::string kind = loss_name(tc.loss.kind);
        l.get("kind", kind);
        tc.loss.kind = parse_loss(kind);
        l.get("p", tc.loss.p);
        l.get("q", tc.loss.q);
      });
    });
    r.object("data", [&](Reader& d) {
      d.get("split_ratio", c.split_ratio);
      d.get("split_seed", c.split_seed);
      std::string seq = "scanpath";
      d.get("sequences", seq);
      if (seq == "scanpath") c.sequences = SequenceMode::Scanpath;
      else if (seq == "equator") c.sequences = SequenceMode::Equator;
      else throw PreconditionError("config: data.sequences must be scanpath or equator, got " + seq);
    });
  }
  c.validate();
  return c;
}

RunConfig apply_overrides(const RunConfig& base, const std::vector<std::string>& overrides) {
  json j = to_json(base);
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0)
      throw PreconditionError("override '" + o + "' must look like key.path=value");
    const std::string path = o.substr(0, eq), text = o.substr(eq + 1);
    json* node = &j;
    std::size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!node->is_object() || !node->contains(part))
        throw PreconditionError("config: unknown key " + path);
      node = &(*node)[part];
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    if (node->is_object()) throw PreconditionError("config: " + path + " is a section, not a value");
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    *node = value;
  }
  return run_config_from_json(j);
}

RunConfig load_run_config(const std::string& path) {
  const std::string text = read_file(path);
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw PreconditionError("config: " + path + " is not valid JSON");
  return run_config_from_json(j);
}

}  // namespace max360iq
