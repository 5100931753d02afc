#include "pcd/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "pcd/binio.hpp"

namespace pcd {

namespace {
constexpr std::string_view kMagic = "PCD1";
constexpr std::uint64_t kMaxDim = 1ULL << 32;
}  // namespace

std::string Checkpoint::encode() const {
  binio::Writer w;
  w.bytes(kMagic);
  w.put<std::uint64_t>(arrays.size());
  for (const auto& [name, m] : arrays) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.put<std::uint32_t>(2);
    w.put<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
    w.put<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) w.put<double>(m.data()[i]);
  }
  w.put<std::uint64_t>(meta.size());
  w.bytes(meta);
  return w.take();
}

Checkpoint Checkpoint::decode(const std::string& bytes) {
  binio::Reader r(bytes);
  r.expect_magic(kMagic);
  Checkpoint ck;
  const auto n = r.get<std::uint64_t>("array count");
  for (std::uint64_t a = 0; a < n; ++a) {
    const auto name_len = r.get<std::uint32_t>("name length");
    std::string name(r.bytes(name_len, "array name"));
    const auto at = r.offset();
    const auto ndim = r.get<std::uint32_t>("ndim");
    if (ndim < 1 || ndim > 2) throw FormatError("unsupported array rank " + std::to_string(ndim), at);
    std::uint64_t dims[2] = {1, 1};
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const auto dat = r.offset();
      dims[d] = r.get<std::uint64_t>("dimension");
      if (dims[d] > kMaxDim) throw FormatError("implausible dimension", dat);
    }
    const std::uint64_t rows = ndim == 2 ? dims[0] : 1;
    const std::uint64_t cols = ndim == 2 ? dims[1] : dims[0];
    if (rows * cols * 8 > r.remaining()) throw FormatError("truncated input while reading array data", r.offset());
    ad::Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.get<double>("array data");
    if (!ck.arrays.emplace(std::move(name), std::move(m)).second) throw FormatError("duplicate array name", at);
  }
  const auto meta_len = r.get<std::uint64_t>("meta length");
  if (meta_len > r.remaining()) throw FormatError("truncated input while reading meta", r.offset());
  ck.meta = std::string(r.bytes(meta_len, "meta"));
  r.expect_end();
  return ck;
}

void Checkpoint::save(const std::string& path) const { write_file_atomic(path, encode()); }

Checkpoint Checkpoint::load(const std::string& path) { return decode(read_file(path)); }

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error("cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace pcd
