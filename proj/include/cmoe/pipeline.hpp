#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmoe/moe.hpp"
#include "cmoe/partition.hpp"
#include "cmoe/synthdata.hpp"

// Two-stage training: stage 1 fits backbone + concept bank + partition head
// with l_cls + lambda_r * l_r; stage 2 freezes them and fits experts + gate
// with l_ept + l_g. Runs are bit-reproducible given the seed, and checkpoints
// capture everything a resumed run needs (parameters, momentum, RNG state).

namespace cmoe {

struct TrainConfig {
  double learning_rate = 1e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double gamma = 1.0;
  int num_concepts = 6;
  int epochs = 200;
  int batch_size = 32;
  double lambda_r = 1.0;
  uint64_t seed = 0;

  void validate() const;
  OptimizerConfig optimizer() const { return {learning_rate, momentum, weight_decay}; }

  // Canonical flat "key = value" text; parsing rejects unknown keys.
  std::string to_text() const;
  static TrainConfig from_text(const std::string& text);
  static TrainConfig load(const std::string& path);
};

// Reference desk-scale experiment used by the regression suite and docs:
// 8 classes over 4 quadrant parts with 2 relevant, 5 concepts, 50 epochs.
synth::SynthSpec reference_spec(uint64_t seed = 42);
TrainConfig reference_config(uint64_t seed = 42);

struct EpochMetrics {
  int epoch = 0;
  double loss_a = 0.0;  // l_cls (stage 1) or l_ept (stage 2)
  double loss_b = 0.0;  // l_r (stage 1) or l_g (stage 2)
  double accuracy = 0.0;
};

void write_metrics_csv(const std::string& path, const char* loss_a_name, const char* loss_b_name,
                       const std::vector<EpochMetrics>& rows);

class Pipeline {
 public:
  // Fresh models; sub-seeds are drawn from cfg.seed with the splitmix
  // expansion (1: partition init, 2: moe init, 3: stage-1 shuffles,
  // 4: stage-2 shuffles).
  Pipeline(TrainConfig cfg, int num_classes);

  // Runs stage-1 epochs from the current epoch counter up to cfg.epochs.
  // Returns one metrics row per epoch run. Throws DivergenceError on a
  // non-finite loss.
  std::vector<EpochMetrics> train_partition(const std::vector<synth::SynthSample>& data);

  // Stage 2; partition parameters are frozen (concept features precomputed
  // once) and provably untouched.
  std::vector<EpochMetrics> train_moe(const std::vector<synth::SynthSample>& data);

  // Accuracy of the full two-stage recognizer.
  double evaluate(const std::vector<synth::SynthSample>& data) const;
  // Accuracy of the stage-1 classification head alone.
  double evaluate_partition(const std::vector<synth::SynthSample>& data) const;

  // Frozen concept features for one sample.
  Tensor concept_features(const synth::SynthSample& sample) const;

  void save(const std::string& path);
  static Pipeline load(const std::string& path);

  TrainConfig& config() { return cfg_; }
  const TrainConfig& config() const { return cfg_; }
  PartitionModel& partition() { return partition_; }
  const PartitionModel& partition() const { return partition_; }
  MoeModel& moe() { return moe_; }
  const MoeModel& moe() const { return moe_; }
  int num_classes() const { return num_classes_; }
  int partition_epochs_done() const { return partition_epochs_done_; }
  int moe_epochs_done() const { return moe_epochs_done_; }

 private:
  TrainConfig cfg_;
  int num_classes_ = 0;
  PartitionModel partition_;
  MoeModel moe_;
  Rng partition_rng_{0};
  Rng moe_rng_{0};
  int partition_epochs_done_ = 0;
  int moe_epochs_done_ = 0;
};

}  // namespace cmoe
