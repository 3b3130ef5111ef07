#pragma once

#include <string>
#include <vector>

#include "cmoe/pipeline.hpp"

// Explanation artifacts over a trained two-stage model: per-concept average
// importance weights, add/remove-part ablation curves, hard-partition
// overlays, and ground-truth partition purity. Everything here is a pure
// function of a frozen model and may fan out over samples.

namespace cmoe::explain {

struct ImportanceReport {
  std::vector<double> avg_weights;  // mean gate weight per concept; sums to 1
  std::vector<int> ranking;         // concept ids, descending weight, ties by id
  double gamma = 0.0;               // gamma the gate was trained with
};

ImportanceReport importance_table(const Pipeline& pipeline,
                                  const std::vector<synth::SynthSample>& data);

enum class AblationMode { kRemove, kAdd };
enum class AblationMechanism { kZeroConceptFeatures, kOccludeInput };

struct AblationPoint {
  int parts = 0;
  double accuracy = 0.0;
};

struct AblationCurve {
  AblationMode mode = AblationMode::kRemove;
  AblationMechanism mechanism = AblationMechanism::kZeroConceptFeatures;
  std::vector<AblationPoint> points;  // parts = 0..K
};

// Remove mode disables concepts in descending importance; add mode starts
// from all-disabled and enables them in the same order. Zeroing concept
// features blanks rows of Z; input occlusion paints each disabled concept's
// majority ground-truth slot with the dataset mean color and reruns the full
// pipeline (requires part masks).
AblationCurve ablation_curve(const Pipeline& pipeline, const std::vector<synth::SynthSample>& data,
                             const ImportanceReport& report, AblationMode mode,
                             AblationMechanism mechanism);

struct PartitionOverlay {
  int size = 0;                   // image side length
  std::vector<uint8_t> rgb;       // interleaved, size*size*3
  std::vector<int> grid;          // upsampled concept id per pixel
  std::vector<double> presence;   // per-concept presence probability
};

// Nearest-neighbor upsample of the hard partition, one fixed palette color
// per concept.
PartitionOverlay partition_overlay(const PartitionModel& model, const synth::SynthSample& sample);

void write_ppm(const std::string& path, int width, int height, const std::vector<uint8_t>& rgb);

struct PurityResult {
  double purity = 0.0;
  // Majority ground-truth slot per concept at feature-map resolution;
  // -1 for concepts that never win a position.
  std::vector<int> concept_to_slot;
};

PurityResult partition_purity(const PartitionModel& model,
                              const std::vector<synth::SynthSample>& data);

// Total average-weight mass per ground-truth slot under the concept->slot map.
std::vector<double> slot_importance(const ImportanceReport& report,
                                    const std::vector<int>& concept_to_slot, int num_parts);

void write_importance_csv(const std::string& path, const ImportanceReport& report);
void write_ablation_csv(const std::string& path, const AblationCurve& curve);
void write_purity_csv(const std::string& path, const PurityResult& purity);

}  // namespace cmoe::explain
