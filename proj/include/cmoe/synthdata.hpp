#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cmoe/error.hpp"
#include "cmoe/rng.hpp"
#include "cmoe/tensor.hpp"

// Procedural generator of part-structured 32x32 RGB images with ground-truth
// part masks. Each part slot is a fixed spatial region (the four quadrants,
// plus an optional center patch) rendered with a slot-specific dark tint and
// one of A bright attribute glyphs (color + shape). The class label is a
// deterministic function of the attributes in the relevant slots; attributes
// of the other slots are drawn independently of the label.

namespace cmoe::synth {

struct SynthSpec {
  int image_size = 32;  // only 32 is supported
  int num_parts = 4;    // 4 quadrants, or 5 with a center patch
  int attributes_per_part = 4;
  int num_classes = 8;
  std::vector<int> relevant_parts = {0, 1};
  uint64_t seed = 0;

  void validate() const;
};

struct SynthSample {
  std::vector<float> image;       // 3 x S x S, channel-major, values in [0,1]
  uint16_t label = 0;
  std::vector<uint8_t> part_mask;  // S x S slot ids
  std::vector<uint8_t> attributes;  // one code per slot

  bool operator==(const SynthSample&) const = default;
};

// Slot id for pixel (y, x) under the given part count.
int slot_at(const SynthSpec& spec, int y, int x);

// Label derived from the relevant-slot attribute codes (mixed-radix code
// modulo num_classes).
int label_of(const SynthSpec& spec, const std::vector<uint8_t>& attributes);

// Deterministic given (spec.seed, index): sample i is reproducible in
// isolation, so generation is order-independent. Labels cycle 0..C-1, which
// keeps any prefix class-balanced to within one sample.
std::vector<SynthSample> generate(const SynthSpec& spec, int n);

// Replace every pixel whose slot is listed with the given fill color.
SynthSample occlude_parts(const SynthSample& sample, const std::vector<int>& slots,
                          const std::array<float, 3>& fill);

// Per-channel mean over all pixels of all samples.
std::array<float, 3> mean_color(const std::vector<SynthSample>& samples);

// Dataset container format, bit-exact across a write/read round trip.
void write_dataset(const std::string& path, const SynthSpec& spec,
                   const std::vector<SynthSample>& samples);
std::pair<SynthSpec, std::vector<SynthSample>> read_dataset(const std::string& path);

// Image as a 3 x S x S double tensor.
Tensor to_tensor(const SynthSample& sample);

}  // namespace cmoe::synth
