#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "cmoe/error.hpp"
#include "cmoe/nn.hpp"
#include "cmoe/tensor.hpp"

// Little-endian binary stream helpers. Short reads raise FormatError so a
// truncated file surfaces as a corruption error, not a crash.

namespace cmoe {

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path);
  ~BinaryWriter();

  void u8(uint8_t v);
  void u16(uint16_t v);
  void u32(uint32_t v);
  void u64(uint64_t v);
  void f32(float v);
  void f64(double v);
  void bytes(const void* data, size_t n);
  void str(const std::string& s);  // u32 length + raw bytes
  void close();                    // flushes; throws IoError on failure

 private:
  std::ofstream out_;
  std::string path_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path);

  uint8_t u8();
  uint16_t u16();
  uint32_t u32();
  uint64_t u64();
  float f32();
  double f64();
  void bytes(void* data, size_t n);
  std::string str();
  bool at_eof();

 private:
  std::ifstream in_;
  std::string path_;
};

// Named parameter records: u32 name length + UTF-8 name + u32 rank +
// dims as u64 + raw little-endian f64 values. A model section is the magic
// string "CMOE", a u32 format version, a u32 record count, then records.
// Momentum buffers ride along as "<name>.mom" records.
inline constexpr uint32_t kSectionVersion = 1;

void write_param_section(BinaryWriter& w, const std::vector<Parameter*>& params);
void read_param_section(BinaryReader& r, const std::vector<Parameter*>& params);

}  // namespace cmoe
