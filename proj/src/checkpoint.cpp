#include "gabmil/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace gabmil {

namespace {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) {
    if (pos + n > buf.size()) {
      throw std::runtime_error("checkpoint: truncated reading " + std::string(what) +
                               " at offset " + std::to_string(pos));
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return buf[pos++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint16_t>(buf[pos] | (buf[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  float f32(const char* what) {
    std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'G', 'M', 'C', 'K'});
  out.push_back(1);  // version
  put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const CheckpointEntry& e : entries) {
    if (e.name.size() > 0xffff) throw std::invalid_argument("checkpoint: name too long");
    if (shape_numel(e.shape) != e.data.size()) {
      throw std::invalid_argument("checkpoint: entry '" + e.name + "' shape/data mismatch");
    }
    put_u16(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<std::uint8_t>(e.shape.size()));
    for (std::size_t d : e.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : e.data) put_f32(out, v);
  }
  return out;
}

std::vector<CheckpointEntry> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r{bytes};
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), "GMCK", 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic at offset 0");
  }
  r.pos = 4;
  std::uint8_t version = r.u8("version");
  if (version != 1) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                             " at offset 4");
  }
  std::uint32_t count = r.u32("entry count");
  std::vector<CheckpointEntry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    std::uint16_t name_len = r.u16("name length");
    r.need(name_len, "name");
    e.name.assign(reinterpret_cast<const char*>(bytes.data() + r.pos), name_len);
    r.pos += name_len;
    std::uint8_t rank = r.u8("rank");
    for (std::uint8_t d = 0; d < rank; ++d) e.shape.push_back(r.u32("dimension"));
    std::size_t n = shape_numel(e.shape);
    e.data.reserve(n);
    for (std::size_t k = 0; k < n; ++k) e.data.push_back(r.f32("values"));
    entries.push_back(std::move(e));
  }
  if (r.pos != bytes.size()) {
    throw std::runtime_error("checkpoint: trailing bytes at offset " + std::to_string(r.pos));
  }
  return entries;
}

void write_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  std::vector<std::uint8_t> bytes = encode_checkpoint(entries);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace gabmil
