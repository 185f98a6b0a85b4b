#include "tsgf/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; a byte-swapping reader is a TODO "
              "for big-endian hosts");

namespace tsgf {

namespace {

constexpr char kMagic[4] = {'T', 'S', 'G', 'F'};

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& is, const std::string& context) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw FormatError(context + ": truncated tensor header");
  return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  if (!t.defined()) throw FormatError("write_tensor: undefined tensor");
  os.write(kMagic, sizeof kMagic);
  write_u32(os, kTensorFormatVersion);
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) write_u32(os, static_cast<std::uint32_t>(e));
  write_u32(os, kDtypeF64);
  const auto d = t.data();
  os.write(reinterpret_cast<const char*>(d.data()),
           static_cast<std::streamsize>(d.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& is, const std::string& context) {
  char magic[4] = {};
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw FormatError(context + ": bad magic string, not a tensor file");
  const auto version = read_u32(is, context);
  if (version != kTensorFormatVersion)
    throw FormatError(context + ": unsupported tensor format version " +
                      std::to_string(version));
  const auto rank = read_u32(is, context);
  if (rank > 8) throw FormatError(context + ": implausible rank " + std::to_string(rank));
  Shape shape(rank);
  std::int64_t n = 1;
  for (auto& e : shape) {
    e = read_u32(is, context);
    if (e == 0) throw FormatError(context + ": zero extent");
    n *= e;
  }
  const auto dtype = read_u32(is, context);
  if (dtype != kDtypeF64)
    throw FormatError(context + ": unsupported dtype tag " + std::to_string(dtype));
  std::vector<double> data(static_cast<size_t>(n));
  if (!is.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(data.size() * sizeof(double))))
    throw FormatError(context + ": truncated tensor data");
  return Tensor::from_data(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("save_tensor: cannot open " + path.string());
  write_tensor(os, t);
  if (!os) throw FormatError("save_tensor: write failed for " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("load_tensor: cannot open " + path.string());
  return read_tensor(is, path.string());
}

}  // namespace tsgf
