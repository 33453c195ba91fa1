#include "casseg/checkpoint.hpp"

#include <unordered_set>

#include "casseg/bytes.hpp"
#include "casseg/error.hpp"

namespace casseg {

namespace {
constexpr std::uint8_t kVersion = 0x01;
constexpr std::uint8_t kFloat32 = 0x01;
}  // namespace

std::vector<std::uint8_t> encode_checkpoint(std::span<const NamedArray> arrays) {
  std::vector<std::uint8_t> out;
  bytes::put_u32(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    std::int64_t n = 1;
    for (auto d : a.shape) n *= d;
    require(n == static_cast<std::int64_t>(a.values.size()), ErrorKind::Shape,
            "checkpoint array '" + a.name + "' shape does not match its data");
    require(a.shape.size() <= 255, ErrorKind::Unsupported, "checkpoint array rank above 255");
    bytes::put_u32(out, static_cast<std::uint32_t>(a.name.size()));
    out.insert(out.end(), a.name.begin(), a.name.end());
    out.insert(out.end(), {'M', 'T', 'E', 'N', kVersion, kFloat32, static_cast<std::uint8_t>(a.shape.size()), 0});
    for (auto d : a.shape) bytes::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : a.values) bytes::put_f32(out, v);
  }
  return out;
}

std::vector<NamedArray> decode_checkpoint(std::span<const std::uint8_t> data) {
  bytes::Reader in(data);
  const std::uint32_t count = in.u32("record count");
  std::vector<NamedArray> arrays;
  std::unordered_set<std::string> names;
  for (std::uint32_t r = 0; r < count; ++r) {
    NamedArray a;
    const std::uint32_t name_len = in.u32("name length");
    auto name = in.take(name_len, "name");
    a.name.assign(name.begin(), name.end());
    auto magic = in.take(4, "array magic");
    if (!std::equal(magic.begin(), magic.end(), "MTEN"))
      fail(ErrorKind::Format, "checkpoint record '" + a.name + "' lacks MTEN magic");
    if (in.u8("version") != kVersion) fail(ErrorKind::Unsupported, "checkpoint record version");
    if (in.u8("dtype") != kFloat32) fail(ErrorKind::Unsupported, "checkpoint dtype other than float32");
    const std::uint8_t rank = in.u8("rank");
    in.u8("padding");
    std::int64_t n = 1;
    for (int i = 0; i < rank; ++i) {
      a.shape.push_back(in.u32("dims"));
      n *= a.shape.back();
    }
    if (static_cast<std::size_t>(n) * 4 > in.remaining())
      fail(ErrorKind::Corruption, "checkpoint payload for '" + a.name + "' is truncated");
    auto payload = in.take(static_cast<std::size_t>(n) * 4, "payload");
    a.values.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) a.values[i] = bytes::get_f32(payload, 4 * i);
    if (!names.insert(a.name).second) fail(ErrorKind::Format, "duplicate checkpoint array '" + a.name + "'");
    arrays.push_back(std::move(a));
  }
  if (in.remaining() != 0) fail(ErrorKind::Corruption, "trailing bytes after checkpoint records");
  return arrays;
}

void write_checkpoint(std::span<const NamedArray> arrays, const std::filesystem::path& path) {
  bytes::write_file(path, encode_checkpoint(arrays));
}

std::vector<NamedArray> read_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(bytes::read_file(path));
  } catch (const Error& e) {
    throw e.with_context(path.string());
  }
}

}  // namespace casseg
