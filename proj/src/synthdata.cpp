#include "cmoe/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cmoe/serialize.hpp"

namespace cmoe::synth {

namespace {

constexpr char kMagic[4] = {'C', 'M', 'D', 'S'};
constexpr uint32_t kVersion = 1;
constexpr int kMaxAttributes = 8;

constexpr std::array<std::array<float, 3>, 8> kAttributeColors = {{
    {0.90f, 0.12f, 0.12f},  // red
    {0.10f, 0.80f, 0.15f},  // green
    {0.15f, 0.35f, 0.95f},  // blue
    {0.92f, 0.85f, 0.10f},  // yellow
    {0.85f, 0.15f, 0.85f},  // magenta
    {0.10f, 0.80f, 0.85f},  // cyan
    {0.95f, 0.55f, 0.10f},  // orange
    {0.92f, 0.92f, 0.92f},  // white
}};

constexpr std::array<std::array<float, 3>, 5> kSlotTints = {{
    {0.22f, 0.08f, 0.08f},
    {0.08f, 0.20f, 0.08f},
    {0.08f, 0.08f, 0.24f},
    {0.20f, 0.18f, 0.06f},
    {0.10f, 0.18f, 0.20f},
}};

// Glyph shape per attribute code, evaluated on offsets from the slot center.
bool in_shape(int code, int dy, int dx) {
  switch (code % 4) {
    case 0: return std::abs(dy) <= 4 && std::abs(dx) <= 4;            // square
    case 1: return dy * dy + dx * dx <= 20;                           // disk
    case 2:                                                           // cross
      return (std::abs(dy) <= 1 && std::abs(dx) <= 4) || (std::abs(dx) <= 1 && std::abs(dy) <= 4);
    default: return std::abs(dy) + std::abs(dx) <= 5;                 // diamond
  }
}

// Slot glyph centers; the center-patch glyph is slightly smaller so it stays
// inside the patch.
std::pair<int, int> slot_center(int slot) {
  switch (slot) {
    case 0: return {8, 8};
    case 1: return {8, 24};
    case 2: return {24, 8};
    case 3: return {24, 24};
    default: return {16, 16};
  }
}

uint64_t ipow(uint64_t base, int exp) {
  uint64_t v = 1;
  for (int i = 0; i < exp; ++i) v *= base;
  return v;
}

}  // namespace

void SynthSpec::validate() const {
  if (image_size != 32) throw ValueError("SynthSpec: only image_size 32 is supported");
  if (num_parts != 4 && num_parts != 5) throw ValueError("SynthSpec: num_parts must be 4 or 5");
  if (attributes_per_part < 1 || attributes_per_part > kMaxAttributes) {
    throw ValueError("SynthSpec: attributes_per_part must be in [1, 8]");
  }
  if (relevant_parts.empty()) throw ValueError("SynthSpec: relevant_parts must be non-empty");
  std::vector<int> rel = relevant_parts;
  std::sort(rel.begin(), rel.end());
  for (size_t i = 0; i < rel.size(); ++i) {
    if (rel[i] < 0 || rel[i] >= num_parts) throw ValueError("SynthSpec: relevant slot out of range");
    if (i > 0 && rel[i] == rel[i - 1]) throw ValueError("SynthSpec: duplicate relevant slot");
  }
  if (num_classes < 2) throw ValueError("SynthSpec: need at least 2 classes");
  const uint64_t combos = ipow(static_cast<uint64_t>(attributes_per_part),
                               static_cast<int>(relevant_parts.size()));
  if (static_cast<uint64_t>(num_classes) > combos) {
    throw ValueError("SynthSpec: num_classes " + std::to_string(num_classes) +
                     " exceeds the " + std::to_string(combos) + " relevant-attribute combinations");
  }
}

int slot_at(const SynthSpec& spec, int y, int x) {
  if (spec.num_parts == 5 && y >= 10 && y < 22 && x >= 10 && x < 22) return 4;
  return (y < 16 ? 0 : 2) + (x < 16 ? 0 : 1);
}

int label_of(const SynthSpec& spec, const std::vector<uint8_t>& attributes) {
  std::vector<int> rel = spec.relevant_parts;
  std::sort(rel.begin(), rel.end());
  uint64_t code = 0;
  for (int slot : rel) {
    code = code * static_cast<uint64_t>(spec.attributes_per_part) + attributes[static_cast<size_t>(slot)];
  }
  return static_cast<int>(code % static_cast<uint64_t>(spec.num_classes));
}

namespace {

SynthSample render(const SynthSpec& spec, int label, Rng& rng) {
  const int s = spec.image_size;
  const int a = spec.attributes_per_part;
  std::vector<int> rel = spec.relevant_parts;
  std::sort(rel.begin(), rel.end());

  // Relevant attributes: uniform choice among the mixed-radix codes that map
  // to this label.
  std::vector<uint64_t> codes;
  const uint64_t combos = ipow(static_cast<uint64_t>(a), static_cast<int>(rel.size()));
  for (uint64_t code = 0; code < combos; ++code) {
    if (code % static_cast<uint64_t>(spec.num_classes) == static_cast<uint64_t>(label)) {
      codes.push_back(code);
    }
  }
  uint64_t code = codes[rng.uniform_int(codes.size())];

  SynthSample sample;
  sample.label = static_cast<uint16_t>(label);
  sample.attributes.assign(static_cast<size_t>(spec.num_parts), 0);
  for (auto it = rel.rbegin(); it != rel.rend(); ++it) {
    sample.attributes[static_cast<size_t>(*it)] = static_cast<uint8_t>(code % static_cast<uint64_t>(a));
    code /= static_cast<uint64_t>(a);
  }
  for (int slot = 0; slot < spec.num_parts; ++slot) {
    if (std::find(rel.begin(), rel.end(), slot) == rel.end()) {
      sample.attributes[static_cast<size_t>(slot)] = static_cast<uint8_t>(rng.uniform_int(static_cast<uint64_t>(a)));
    }
  }

  sample.part_mask.resize(static_cast<size_t>(s) * s);
  sample.image.resize(3 * static_cast<size_t>(s) * s);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const int slot = slot_at(spec, y, x);
      sample.part_mask[static_cast<size_t>(y) * s + x] = static_cast<uint8_t>(slot);
      const int attr = sample.attributes[static_cast<size_t>(slot)];
      const auto [cy, cx] = slot_center(slot);
      const bool glyph = in_shape(attr, y - cy, x - cx);
      const auto& color = glyph ? kAttributeColors[static_cast<size_t>(attr)]
                                : kSlotTints[static_cast<size_t>(slot)];
      for (int ch = 0; ch < 3; ++ch) {
        sample.image[(static_cast<size_t>(ch) * s + y) * s + x] = color[static_cast<size_t>(ch)];
      }
    }
  }
  for (auto& v : sample.image) {
    v = std::clamp(v + 0.05f * static_cast<float>(rng.normal()), 0.0f, 1.0f);
  }
  return sample;
}

}  // namespace

std::vector<SynthSample> generate(const SynthSpec& spec, int n) {
  spec.validate();
  if (n < 1) throw ValueError("generate: n must be >= 1");
  std::vector<SynthSample> samples;
  samples.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::fork(spec.seed, static_cast<uint64_t>(i));
    samples.push_back(render(spec, i % spec.num_classes, rng));
  }
  return samples;
}

SynthSample occlude_parts(const SynthSample& sample, const std::vector<int>& slots,
                          const std::array<float, 3>& fill) {
  const int num_parts = static_cast<int>(sample.attributes.size());
  for (int slot : slots) {
    if (slot < 0 || slot >= num_parts) {
      throw ValueError("occlude_parts: unknown slot id " + std::to_string(slot));
    }
  }
  SynthSample out = sample;
  const size_t plane = sample.part_mask.size();
  for (size_t p = 0; p < plane; ++p) {
    if (std::find(slots.begin(), slots.end(), static_cast<int>(sample.part_mask[p])) == slots.end()) {
      continue;
    }
    for (int ch = 0; ch < 3; ++ch) {
      out.image[static_cast<size_t>(ch) * plane + p] = fill[static_cast<size_t>(ch)];
    }
  }
  return out;
}

std::array<float, 3> mean_color(const std::vector<SynthSample>& samples) {
  if (samples.empty()) throw ValueError("mean_color: empty sample list");
  std::array<double, 3> acc = {0.0, 0.0, 0.0};
  size_t count = 0;
  for (const auto& s : samples) {
    const size_t plane = s.image.size() / 3;
    for (int ch = 0; ch < 3; ++ch) {
      for (size_t p = 0; p < plane; ++p) {
        acc[static_cast<size_t>(ch)] += s.image[static_cast<size_t>(ch) * plane + p];
      }
    }
    count += plane;
  }
  return {static_cast<float>(acc[0] / static_cast<double>(count)),
          static_cast<float>(acc[1] / static_cast<double>(count)),
          static_cast<float>(acc[2] / static_cast<double>(count))};
}

void write_dataset(const std::string& path, const SynthSpec& spec,
                   const std::vector<SynthSample>& samples) {
  BinaryWriter w(path);
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.u32(static_cast<uint32_t>(spec.image_size));
  w.u32(static_cast<uint32_t>(spec.num_parts));
  w.u32(static_cast<uint32_t>(spec.attributes_per_part));
  w.u32(static_cast<uint32_t>(spec.num_classes));
  w.u32(static_cast<uint32_t>(spec.relevant_parts.size()));
  for (int slot : spec.relevant_parts) w.u32(static_cast<uint32_t>(slot));
  w.u64(spec.seed);
  w.u64(static_cast<uint64_t>(samples.size()));
  for (const auto& s : samples) {
    w.bytes(s.image.data(), s.image.size() * sizeof(float));
    w.u16(s.label);
    w.bytes(s.part_mask.data(), s.part_mask.size());
    w.bytes(s.attributes.data(), s.attributes.size());
  }
  w.close();
}

std::pair<SynthSpec, std::vector<SynthSample>> read_dataset(const std::string& path) {
  BinaryReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("'" + path + "' is not a dataset file (bad magic)");
  }
  const uint32_t version = r.u32();
  if (version != kVersion) {
    throw FormatError("'" + path + "': unsupported dataset version " + std::to_string(version));
  }
  SynthSpec spec;
  spec.image_size = static_cast<int>(r.u32());
  spec.num_parts = static_cast<int>(r.u32());
  spec.attributes_per_part = static_cast<int>(r.u32());
  spec.num_classes = static_cast<int>(r.u32());
  const uint32_t num_rel = r.u32();
  if (num_rel > 16) throw FormatError("'" + path + "': implausible relevant-slot count");
  spec.relevant_parts.resize(num_rel);
  for (auto& slot : spec.relevant_parts) slot = static_cast<int>(r.u32());
  spec.seed = r.u64();
  spec.validate();

  const uint64_t n = r.u64();
  if (n > (1ull << 32)) throw FormatError("'" + path + "': implausible sample count");
  const size_t plane = static_cast<size_t>(spec.image_size) * spec.image_size;
  std::vector<SynthSample> samples(static_cast<size_t>(n));
  for (auto& s : samples) {
    s.image.resize(3 * plane);
    r.bytes(s.image.data(), s.image.size() * sizeof(float));
    s.label = r.u16();
    s.part_mask.resize(plane);
    r.bytes(s.part_mask.data(), s.part_mask.size());
    s.attributes.resize(static_cast<size_t>(spec.num_parts));
    r.bytes(s.attributes.data(), s.attributes.size());
  }
  if (!r.at_eof()) throw FormatError("'" + path + "': trailing bytes after sample data");
  return {spec, std::move(samples)};
}

Tensor to_tensor(const SynthSample& sample) {
  const int plane = static_cast<int>(sample.part_mask.size());
  const int s = static_cast<int>(std::lround(std::sqrt(static_cast<double>(plane))));
  std::vector<double> vals(sample.image.begin(), sample.image.end());
  return Tensor::from(Shape{3, s, s}, std::move(vals));
}

}  // namespace cmoe::synth
