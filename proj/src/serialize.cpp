#include "cmoe/serialize.hpp"

#include <cstring>
#include <map>

namespace cmoe {

BinaryWriter::BinaryWriter(const std::string& path) : out_(path, std::ios::binary), path_(path) {
  if (!out_) throw IoError("cannot open '" + path + "' for writing");
}

BinaryWriter::~BinaryWriter() = default;

void BinaryWriter::u8(uint8_t v) { bytes(&v, 1); }
void BinaryWriter::u16(uint16_t v) { bytes(&v, 2); }
void BinaryWriter::u32(uint32_t v) { bytes(&v, 4); }
void BinaryWriter::u64(uint64_t v) { bytes(&v, 8); }
void BinaryWriter::f32(float v) { bytes(&v, 4); }
void BinaryWriter::f64(double v) { bytes(&v, 8); }

void BinaryWriter::bytes(const void* data, size_t n) {
  out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out_) throw IoError("write failure on '" + path_ + "'");
}

void BinaryWriter::str(const std::string& s) {
  u32(static_cast<uint32_t>(s.size()));
  bytes(s.data(), s.size());
}

void BinaryWriter::close() {
  out_.close();
  if (!out_) throw IoError("close failure on '" + path_ + "'");
}

BinaryReader::BinaryReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
  if (!in_) throw IoError("cannot open '" + path + "' for reading");
}

uint8_t BinaryReader::u8() {
  uint8_t v;
  bytes(&v, 1);
  return v;
}
uint16_t BinaryReader::u16() {
  uint16_t v;
  bytes(&v, 2);
  return v;
}
uint32_t BinaryReader::u32() {
  uint32_t v;
  bytes(&v, 4);
  return v;
}
uint64_t BinaryReader::u64() {
  uint64_t v;
  bytes(&v, 8);
  return v;
}
float BinaryReader::f32() {
  float v;
  bytes(&v, 4);
  return v;
}
double BinaryReader::f64() {
  double v;
  bytes(&v, 8);
  return v;
}

void BinaryReader::bytes(void* data, size_t n) {
  in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in_.gcount()) != n) {
    throw FormatError("'" + path_ + "' is truncated or corrupt");
  }
}

std::string BinaryReader::str() {
  const uint32_t n = u32();
  if (n > (1u << 20)) throw FormatError("'" + path_ + "': implausible string length");
  std::string s(n, '\0');
  bytes(s.data(), n);
  return s;
}

bool BinaryReader::at_eof() { return in_.peek() == std::char_traits<char>::eof(); }

namespace {

constexpr char kSectionMagic[4] = {'C', 'M', 'O', 'E'};

void write_record(BinaryWriter& w, const std::string& name, const Shape& shape,
                  const double* data, size_t n) {
  w.str(name);
  w.u32(static_cast<uint32_t>(shape.size()));
  for (int d : shape) w.u64(static_cast<uint64_t>(d));
  w.bytes(data, n * sizeof(double));
}

}  // namespace

void write_param_section(BinaryWriter& w, const std::vector<Parameter*>& params) {
  w.bytes(kSectionMagic, 4);
  w.u32(kSectionVersion);
  w.u32(static_cast<uint32_t>(2 * params.size()));
  for (const Parameter* p : params) {
    const auto vals = p->tensor.values();
    write_record(w, p->name, p->tensor.shape(), vals.data(), vals.size());
    write_record(w, p->name + ".mom", p->tensor.shape(), p->momentum.data(), p->momentum.size());
  }
}

void read_param_section(BinaryReader& r, const std::vector<Parameter*>& params) {
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kSectionMagic, 4) != 0) {
    throw FormatError("parameter section has bad magic bytes");
  }
  const uint32_t version = r.u32();
  if (version != kSectionVersion) {
    throw FormatError("unsupported parameter section version " + std::to_string(version));
  }
  const uint32_t count = r.u32();

  std::map<std::string, std::pair<Shape, std::vector<double>>> records;
  for (uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    const uint32_t rank = r.u32();
    if (rank > 8) throw FormatError("record '" + name + "': implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(r.u64());
    std::vector<double> data(shape_numel(shape));
    r.bytes(data.data(), data.size() * sizeof(double));
    records.emplace(name, std::make_pair(std::move(shape), std::move(data)));
  }

  for (Parameter* p : params) {
    auto it = records.find(p->name);
    if (it == records.end()) throw FormatError("checkpoint is missing parameter '" + p->name + "'");
    if (!same_shape(it->second.first, p->tensor.shape())) {
      throw FormatError("parameter '" + p->name + "' has shape " + shape_str(it->second.first) +
                        ", expected " + shape_str(p->tensor.shape()));
    }
    auto vals = p->tensor.values();
    std::copy(it->second.second.begin(), it->second.second.end(), vals.begin());

    auto mit = records.find(p->name + ".mom");
    if (mit == records.end()) {
      throw FormatError("checkpoint is missing momentum for '" + p->name + "'");
    }
    if (mit->second.second.size() != p->momentum.size()) {
      throw FormatError("momentum buffer for '" + p->name + "' has the wrong size");
    }
    p->momentum = mit->second.second;
  }
}

}  // namespace cmoe
