#include "cmoe/explain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

namespace cmoe::explain {

namespace {

constexpr uint8_t kPalette[8][3] = {
    {230, 25, 75},   // red
    {60, 180, 75},   // green
    {0, 130, 200},   // blue
    {255, 225, 25},  // yellow
    {145, 30, 180},  // purple
    {70, 240, 240},  // cyan
    {245, 130, 48},  // orange
    {128, 128, 128}, // gray
};

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

ImportanceReport importance_table(const Pipeline& pipeline,
                                  const std::vector<synth::SynthSample>& data) {
  if (data.empty()) throw ValueError("importance_table: empty dataset split");
  NoGradGuard no_grad;
  const int k = pipeline.moe().num_concepts();
  ImportanceReport report;
  report.gamma = pipeline.config().gamma;
  report.avg_weights.assign(static_cast<size_t>(k), 0.0);
  for (const auto& s : data) {
    auto fwd = pipeline.partition().forward(synth::to_tensor(s));
    Tensor w = pipeline.moe().gate.forward(fwd.concept_features);
    const auto wv = w.values();
    for (int j = 0; j < k; ++j) report.avg_weights[static_cast<size_t>(j)] += wv[static_cast<size_t>(j)];
  }
  for (auto& v : report.avg_weights) v /= static_cast<double>(data.size());
  report.ranking.resize(static_cast<size_t>(k));
  std::iota(report.ranking.begin(), report.ranking.end(), 0);
  std::stable_sort(report.ranking.begin(), report.ranking.end(), [&](int a, int b) {
    return report.avg_weights[static_cast<size_t>(a)] > report.avg_weights[static_cast<size_t>(b)];
  });
  return report;
}

namespace {

Tensor zero_rows(const Tensor& z, const std::vector<int>& rows) {
  Tensor out = z.detach().clone();
  auto vals = out.values();
  const int d = out.dim(1);
  for (int row : rows) {
    std::fill_n(vals.begin() + static_cast<size_t>(row) * d, d, 0.0);
  }
  return out;
}

double accuracy_with_disabled_features(const Pipeline& pipeline,
                                       const std::vector<Tensor>& features,
                                       const std::vector<synth::SynthSample>& data,
                                       const std::vector<int>& disabled) {
  size_t correct = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    GateOutput out = pipeline.moe().forward(zero_rows(features[i], disabled));
    if (out.predicted_class == data[i].label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double accuracy_with_occluded_slots(const Pipeline& pipeline,
                                    const std::vector<synth::SynthSample>& data,
                                    const std::vector<int>& slots,
                                    const std::array<float, 3>& fill) {
  size_t correct = 0;
  for (const auto& s : data) {
    const synth::SynthSample occluded = synth::occlude_parts(s, slots, fill);
    auto fwd = pipeline.partition().forward(synth::to_tensor(occluded));
    GateOutput out = pipeline.moe().forward(fwd.concept_features);
    if (out.predicted_class == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace

AblationCurve ablation_curve(const Pipeline& pipeline, const std::vector<synth::SynthSample>& data,
                             const ImportanceReport& report, AblationMode mode,
                             AblationMechanism mechanism) {
  if (data.empty()) throw ValueError("ablation_curve: empty dataset split");
  const int k = pipeline.moe().num_concepts();
  if (static_cast<int>(report.ranking.size()) != k) {
    throw ShapeError("ablation_curve: report ranks " + std::to_string(report.ranking.size()) +
                     " concepts, model has " + std::to_string(k));
  }
  NoGradGuard no_grad;
  AblationCurve curve;
  curve.mode = mode;
  curve.mechanism = mechanism;

  std::vector<Tensor> features;
  std::vector<int> concept_to_slot;
  std::array<float, 3> fill = {0.0f, 0.0f, 0.0f};
  if (mechanism == AblationMechanism::kZeroConceptFeatures) {
    features.reserve(data.size());
    for (const auto& s : data) {
      features.push_back(pipeline.partition().forward(synth::to_tensor(s)).concept_features);
    }
  } else {
    concept_to_slot = partition_purity(pipeline.partition(), data).concept_to_slot;
    fill = synth::mean_color(data);
  }

  for (int m = 0; m <= k; ++m) {
    // Remove mode: top-m disabled. Add mode: top-m enabled, rest disabled.
    std::vector<int> disabled;
    if (mode == AblationMode::kRemove) {
      disabled.assign(report.ranking.begin(), report.ranking.begin() + m);
    } else {
      disabled.assign(report.ranking.begin() + m, report.ranking.end());
    }
    double acc = 0.0;
    if (mechanism == AblationMechanism::kZeroConceptFeatures) {
      acc = accuracy_with_disabled_features(pipeline, features, data, disabled);
    } else {
      std::set<int> slots;
      for (int c : disabled) {
        const int slot = concept_to_slot[static_cast<size_t>(c)];
        if (slot >= 0) slots.insert(slot);
      }
      acc = accuracy_with_occluded_slots(pipeline, data,
                                         std::vector<int>(slots.begin(), slots.end()), fill);
    }
    curve.points.push_back({m, acc});
  }
  return curve;
}

PartitionOverlay partition_overlay(const PartitionModel& model, const synth::SynthSample& sample) {
  NoGradGuard no_grad;
  Tensor image = synth::to_tensor(sample);
  auto fwd = model.forward(image);
  const auto grid = hard_partition(fwd.occurrence);
  const int fh = fwd.occurrence.dim(1), fw = fwd.occurrence.dim(2);
  const int size = image.dim(1);
  const int factor = size / fh;

  PartitionOverlay overlay;
  overlay.size = size;
  overlay.grid.resize(static_cast<size_t>(size) * size);
  overlay.rgb.resize(static_cast<size_t>(size) * size * 3);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const int cy = std::min(y / factor, fh - 1);
      const int cx = std::min(x / factor, fw - 1);
      const int concept = grid[static_cast<size_t>(cy) * fw + cx];
      overlay.grid[static_cast<size_t>(y) * size + x] = concept;
      const auto& color = kPalette[static_cast<size_t>(concept) % 8];
      for (int ch = 0; ch < 3; ++ch) {
        overlay.rgb[(static_cast<size_t>(y) * size + x) * 3 + ch] = color[ch];
      }
    }
  }
  overlay.presence.assign(fwd.presence.values().begin(), fwd.presence.values().end());
  return overlay;
}

void write_ppm(const std::string& path, int width, int height, const std::vector<uint8_t>& rgb) {
  if (rgb.size() != static_cast<size_t>(width) * height * 3) {
    throw ShapeError("write_ppm: buffer does not match dimensions");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "P6\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!out) throw IoError("write failure on '" + path + "'");
}

PurityResult partition_purity(const PartitionModel& model,
                              const std::vector<synth::SynthSample>& data) {
  if (data.empty()) throw ValueError("partition_purity: empty dataset split");
  for (const auto& s : data) {
    if (s.part_mask.empty()) throw ValueError("partition_purity: samples have no ground-truth masks");
  }
  NoGradGuard no_grad;

  const int k = model.num_concepts();
  int num_parts = 0;
  for (const auto& s : data) {
    for (uint8_t m : s.part_mask) num_parts = std::max(num_parts, static_cast<int>(m) + 1);
  }

  // One pass caching per-sample hard partitions and majority-downsampled
  // masks at feature resolution.
  std::vector<std::vector<int>> grids, masks;
  grids.reserve(data.size());
  masks.reserve(data.size());
  int fh = 0, fw = 0;
  for (const auto& s : data) {
    Tensor image = synth::to_tensor(s);
    auto fwd = model.forward(image);
    fh = fwd.occurrence.dim(1);
    fw = fwd.occurrence.dim(2);
    grids.push_back(hard_partition(fwd.occurrence));

    const int size = image.dim(1);
    const int factor = size / fh;
    std::vector<int> down(static_cast<size_t>(fh) * fw, 0);
    for (int cy = 0; cy < fh; ++cy) {
      for (int cx = 0; cx < fw; ++cx) {
        std::vector<int> counts(static_cast<size_t>(num_parts), 0);
        for (int y = cy * factor; y < (cy + 1) * factor; ++y) {
          for (int x = cx * factor; x < (cx + 1) * factor; ++x) {
            ++counts[s.part_mask[static_cast<size_t>(y) * size + x]];
          }
        }
        int best = 0;
        for (int p = 1; p < num_parts; ++p) {
          if (counts[static_cast<size_t>(p)] > counts[static_cast<size_t>(best)]) best = p;
        }
        down[static_cast<size_t>(cy) * fw + cx] = best;
      }
    }
    masks.push_back(std::move(down));
  }

  std::vector<std::vector<long>> counts(static_cast<size_t>(k),
                                        std::vector<long>(static_cast<size_t>(num_parts), 0));
  for (size_t i = 0; i < grids.size(); ++i) {
    for (size_t p = 0; p < grids[i].size(); ++p) {
      ++counts[static_cast<size_t>(grids[i][p])][static_cast<size_t>(masks[i][p])];
    }
  }

  PurityResult result;
  result.concept_to_slot.assign(static_cast<size_t>(k), -1);
  for (int j = 0; j < k; ++j) {
    long total = 0, best_count = 0;
    int best = -1;
    for (int p = 0; p < num_parts; ++p) {
      const long c = counts[static_cast<size_t>(j)][static_cast<size_t>(p)];
      total += c;
      if (c > best_count) {
        best_count = c;
        best = p;
      }
    }
    if (total > 0) result.concept_to_slot[static_cast<size_t>(j)] = best;
  }

  long correct = 0, total = 0;
  for (size_t i = 0; i < grids.size(); ++i) {
    for (size_t p = 0; p < grids[i].size(); ++p) {
      if (result.concept_to_slot[static_cast<size_t>(grids[i][p])] == masks[i][p]) ++correct;
      ++total;
    }
  }
  result.purity = static_cast<double>(correct) / static_cast<double>(total);
  return result;
}

std::vector<double> slot_importance(const ImportanceReport& report,
                                    const std::vector<int>& concept_to_slot, int num_parts) {
  if (report.avg_weights.size() != concept_to_slot.size()) {
    throw ShapeError("slot_importance: report and concept map disagree on K");
  }
  std::vector<double> mass(static_cast<size_t>(num_parts), 0.0);
  for (size_t j = 0; j < concept_to_slot.size(); ++j) {
    const int slot = concept_to_slot[j];
    if (slot >= 0 && slot < num_parts) mass[static_cast<size_t>(slot)] += report.avg_weights[j];
  }
  return mass;
}

void write_importance_csv(const std::string& path, const ImportanceReport& report) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "concept,avg_weight,rank,gamma\n";
  std::vector<int> rank_of(report.ranking.size());
  for (size_t r = 0; r < report.ranking.size(); ++r) rank_of[static_cast<size_t>(report.ranking[r])] = static_cast<int>(r);
  for (size_t j = 0; j < report.avg_weights.size(); ++j) {
    out << j << "," << fmt_double(report.avg_weights[j]) << "," << rank_of[j] << ","
        << fmt_double(report.gamma) << "\n";
  }
  if (!out) throw IoError("write failure on '" + path + "'");
}

void write_ablation_csv(const std::string& path, const AblationCurve& curve) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "parts,accuracy\n";
  for (const auto& p : curve.points) out << p.parts << "," << fmt_double(p.accuracy) << "\n";
  if (!out) throw IoError("write failure on '" + path + "'");
}

void write_purity_csv(const std::string& path, const PurityResult& purity) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "purity\n" << fmt_double(purity.purity) << "\n";
  out << "concept,majority_slot\n";
  for (size_t j = 0; j < purity.concept_to_slot.size(); ++j) {
    out << j << "," << purity.concept_to_slot[j] << "\n";
  }
  if (!out) throw IoError("write failure on '" + path + "'");
}

}  // namespace cmoe::explain
