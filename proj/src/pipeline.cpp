#include "cmoe/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cmoe/serialize.hpp"

namespace cmoe {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0,1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (gamma < 0.0) throw ConfigError("gamma must be non-negative");
  if (num_concepts < 2) throw ConfigError("num_concepts must be >= 2");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (lambda_r < 0.0) throw ConfigError("lambda_r must be non-negative");
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw ConfigError("");
    return d;
  } catch (...) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a number");
  }
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    long n = std::stol(v, &pos);
    if (pos != v.size()) throw ConfigError("");
    return static_cast<int>(n);
  } catch (...) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as an integer");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    uint64_t n = std::stoull(v, &pos);
    if (pos != v.size()) throw ConfigError("");
    return n;
  } catch (...) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as an unsigned integer");
  }
}

}  // namespace

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "learning_rate = " << fmt_double(learning_rate) << "\n";
  os << "momentum = " << fmt_double(momentum) << "\n";
  os << "weight_decay = " << fmt_double(weight_decay) << "\n";
  os << "gamma = " << fmt_double(gamma) << "\n";
  os << "num_concepts = " << num_concepts << "\n";
  os << "epochs = " << epochs << "\n";
  os << "batch_size = " << batch_size << "\n";
  os << "lambda_r = " << fmt_double(lambda_r) << "\n";
  os << "seed = " << seed << "\n";
  return os.str();
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  TrainConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    if (key == "learning_rate") {
      cfg.learning_rate = parse_double(key, value);
    } else if (key == "momentum") {
      cfg.momentum = parse_double(key, value);
    } else if (key == "weight_decay") {
      cfg.weight_decay = parse_double(key, value);
    } else if (key == "gamma") {
      cfg.gamma = parse_double(key, value);
    } else if (key == "num_concepts") {
      cfg.num_concepts = parse_int(key, value);
    } else if (key == "epochs") {
      cfg.epochs = parse_int(key, value);
    } else if (key == "batch_size") {
      cfg.batch_size = parse_int(key, value);
    } else if (key == "lambda_r") {
      cfg.lambda_r = parse_double(key, value);
    } else if (key == "seed") {
      cfg.seed = parse_u64(key, value);
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str());
}

synth::SynthSpec reference_spec(uint64_t seed) {
  synth::SynthSpec spec;
  spec.num_parts = 4;
  spec.attributes_per_part = 4;
  spec.num_classes = 8;
  spec.relevant_parts = {0, 1};
  spec.seed = seed;
  return spec;
}

TrainConfig reference_config(uint64_t seed) {
  TrainConfig cfg;
  cfg.learning_rate = 0.02;
  cfg.num_concepts = 5;
  cfg.epochs = 50;
  cfg.seed = seed;
  return cfg;
}

void write_metrics_csv(const std::string& path, const char* loss_a_name, const char* loss_b_name,
                       const std::vector<EpochMetrics>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "epoch," << loss_a_name << "," << loss_b_name << ",accuracy\n";
  for (const auto& r : rows) {
    out << r.epoch << "," << fmt_double(r.loss_a) << "," << fmt_double(r.loss_b) << ","
        << fmt_double(r.accuracy) << "\n";
  }
  if (!out) throw IoError("write failure on '" + path + "'");
}

Pipeline::Pipeline(TrainConfig cfg, int num_classes) : cfg_(std::move(cfg)), num_classes_(num_classes) {
  cfg_.validate();
  if (num_classes_ < 2) throw ValueError("Pipeline: need at least 2 classes");
  Rng partition_init = Rng::fork(cfg_.seed, 1);
  Rng moe_init = Rng::fork(cfg_.seed, 2);
  partition_ = PartitionModel(cfg_.num_concepts, num_classes_, partition_init);
  moe_ = MoeModel(cfg_.num_concepts, PartitionModel::kFeatureDim, num_classes_, moe_init);
  partition_rng_ = Rng::fork(cfg_.seed, 3);
  moe_rng_ = Rng::fork(cfg_.seed, 4);
}

namespace {

std::vector<size_t> epoch_order(size_t n, Rng& rng) {
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  return order;
}

void check_finite(double loss, int epoch, const char* stage) {
  if (!std::isfinite(loss)) {
    throw DivergenceError(std::string(stage) + " diverged at epoch " + std::to_string(epoch) +
                              " (non-finite loss)",
                          epoch);
  }
}

}  // namespace

std::vector<EpochMetrics> Pipeline::train_partition(const std::vector<synth::SynthSample>& data) {
  if (data.empty()) throw ValueError("train_partition: empty dataset");
  std::vector<Tensor> images;
  images.reserve(data.size());
  for (const auto& s : data) images.push_back(synth::to_tensor(s));

  auto params = partition_.params();
  const OptimizerConfig opt = cfg_.optimizer();
  std::vector<EpochMetrics> log;
  for (int epoch = partition_epochs_done_ + 1; epoch <= cfg_.epochs; ++epoch) {
    const auto order = epoch_order(data.size(), partition_rng_);
    double cls_sum = 0.0, reg_sum = 0.0;
    size_t correct = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg_.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg_.batch_size));
      std::vector<Tensor> logits, presences;
      std::vector<int> labels;
      for (size_t i = start; i < end; ++i) {
        const size_t idx = order[i];
        auto fwd = partition_.forward(images[idx]);
        logits.push_back(fwd.logits);
        presences.push_back(fwd.presence);
        labels.push_back(data[idx].label);
        if (argmax_lowest(fwd.logits.values()) == data[idx].label) ++correct;
      }
      Tensor cls = partition_cls_loss(logits, labels);
      Tensor reg = concept_presence_loss(presences);
      Tensor total = partition_total_loss(cls, reg, cfg_.lambda_r);
      check_finite(total.item(), epoch, "stage 1");
      const double bs = static_cast<double>(end - start);
      cls_sum += cls.item() * bs;
      reg_sum += reg.item() * bs;
      total.backward();
      sgd_step(params, opt);
    }
    const double n = static_cast<double>(data.size());
    log.push_back({epoch, cls_sum / n, reg_sum / n, static_cast<double>(correct) / n});
    partition_epochs_done_ = epoch;
  }
  return log;
}

std::vector<EpochMetrics> Pipeline::train_moe(const std::vector<synth::SynthSample>& data) {
  if (data.empty()) throw ValueError("train_moe: empty dataset");

  // Stage-1 parameters are frozen: concept features are computed once with
  // no graph attached, so no gradient can reach the partition model.
  std::vector<Tensor> features;
  features.reserve(data.size());
  {
    NoGradGuard no_grad;
    for (const auto& s : data) {
      features.push_back(partition_.forward(synth::to_tensor(s)).concept_features);
    }
  }

  auto params = moe_.params();
  const OptimizerConfig opt = cfg_.optimizer();
  std::vector<EpochMetrics> log;
  for (int epoch = moe_epochs_done_ + 1; epoch <= cfg_.epochs; ++epoch) {
    const auto order = epoch_order(data.size(), moe_rng_);
    double ept_sum = 0.0, gate_sum = 0.0;
    size_t correct = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg_.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg_.batch_size));
      std::vector<std::vector<Tensor>> expert_probs;
      std::vector<Tensor> aggregates, weights;
      std::vector<int> labels;
      for (size_t i = start; i < end; ++i) {
        const size_t idx = order[i];
        GateOutput out = moe_.forward(features[idx]);
        expert_probs.push_back(std::move(out.expert_probs));
        aggregates.push_back(out.aggregate);
        weights.push_back(out.weights);
        labels.push_back(data[idx].label);
        if (out.predicted_class == data[idx].label) ++correct;
      }
      Tensor ept = expert_loss(expert_probs, labels);
      Tensor gate = gate_loss(aggregates, labels, weights, cfg_.gamma);
      Tensor total = moe_total_loss(ept, gate);
      check_finite(total.item(), epoch, "stage 2");
      const double bs = static_cast<double>(end - start);
      ept_sum += ept.item() * bs;
      gate_sum += gate.item() * bs;
      total.backward();
      sgd_step(params, opt);
    }
    const double n = static_cast<double>(data.size());
    log.push_back({epoch, ept_sum / n, gate_sum / n, static_cast<double>(correct) / n});
    moe_epochs_done_ = epoch;
  }
  return log;
}

double Pipeline::evaluate(const std::vector<synth::SynthSample>& data) const {
  if (data.empty()) throw ValueError("evaluate: empty dataset");
  NoGradGuard no_grad;
  size_t correct = 0;
  for (const auto& s : data) {
    auto fwd = partition_.forward(synth::to_tensor(s));
    GateOutput out = moe_.forward(fwd.concept_features);
    if (out.predicted_class == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double Pipeline::evaluate_partition(const std::vector<synth::SynthSample>& data) const {
  if (data.empty()) throw ValueError("evaluate_partition: empty dataset");
  NoGradGuard no_grad;
  size_t correct = 0;
  for (const auto& s : data) {
    auto fwd = partition_.forward(synth::to_tensor(s));
    if (argmax_lowest(fwd.logits.values()) == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

Tensor Pipeline::concept_features(const synth::SynthSample& sample) const {
  NoGradGuard no_grad;
  return partition_.forward(synth::to_tensor(sample)).concept_features;
}

namespace {

constexpr char kCheckpointMagic[4] = {'C', 'M', 'O', 'E'};
constexpr uint32_t kCheckpointVersion = 1;

void write_rng(BinaryWriter& w, const Rng& rng) {
  const auto words = rng.state();
  w.u32(static_cast<uint32_t>(words.size()));
  for (uint64_t v : words) w.u64(v);
}

Rng read_rng(BinaryReader& r) {
  const uint32_t n = r.u32();
  if (n > 64) throw FormatError("checkpoint: implausible RNG state length");
  std::vector<uint64_t> words(n);
  for (auto& v : words) v = r.u64();
  Rng rng(0);
  rng.set_state(words);
  return rng;
}

}  // namespace

void Pipeline::save(const std::string& path) {
  BinaryWriter w(path);
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(cfg_.to_text());
  w.u32(static_cast<uint32_t>(num_classes_));
  w.u32(static_cast<uint32_t>(partition_epochs_done_));
  w.u32(static_cast<uint32_t>(moe_epochs_done_));
  write_rng(w, partition_rng_);
  write_rng(w, moe_rng_);
  w.str("partition");
  write_param_section(w, partition_.params());
  w.str("moe");
  write_param_section(w, moe_.params());
  w.close();
}

Pipeline Pipeline::load(const std::string& path) {
  BinaryReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw FormatError("'" + path + "' is not a checkpoint (bad magic)");
  }
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("'" + path + "': unsupported checkpoint version " + std::to_string(version));
  }
  TrainConfig cfg = TrainConfig::from_text(r.str());
  const int num_classes = static_cast<int>(r.u32());
  const int part_done = static_cast<int>(r.u32());
  const int moe_done = static_cast<int>(r.u32());
  Rng part_rng = read_rng(r);
  Rng moe_rng = read_rng(r);

  Pipeline p(cfg, num_classes);
  if (r.str() != "partition") throw FormatError("'" + path + "': expected partition section");
  read_param_section(r, p.partition_.params());
  if (r.str() != "moe") throw FormatError("'" + path + "': expected moe section");
  read_param_section(r, p.moe_.params());
  p.partition_epochs_done_ = part_done;
  p.moe_epochs_done_ = moe_done;
  p.partition_rng_ = part_rng;
  p.moe_rng_ = moe_rng;
  return p;
}

}  // namespace cmoe
