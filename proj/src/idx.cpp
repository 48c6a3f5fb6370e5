#include "fsfl/idx.hpp"

#include "fsfl/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace fsfl {

namespace {

std::uint32_t read_be32(std::istream& in, std::size_t& offset, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) throw FormatError("truncated " + what, offset + static_cast<std::size_t>(in.gcount()));
  offset += 4;
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

IdxArray read_idx_named(std::istream& in, const std::string& who) {
  std::size_t offset = 0;
  const std::uint32_t magic = read_be32(in, offset, who + "magic");
  if ((magic & 0xFFFFFF00u) != 0x0800u) throw FormatError(who + "bad IDX magic (expected unsigned-byte data)", 0);
  const std::uint32_t ndim = magic & 0xFFu;
  if (ndim == 0) throw FormatError(who + "IDX array with zero dimensions", 3);
  IdxArray a;
  std::size_t total = 1;
  for (std::uint32_t d = 0; d < ndim; ++d) {
    a.dims.push_back(read_be32(in, offset, who + "dimension header"));
    total *= a.dims.back();
  }
  a.data.resize(total);
  in.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(total));
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got != total)
    throw FormatError(who + "truncated IDX data, " + std::to_string(total - got) + " bytes missing", offset + got);
  return a;
}

}  // namespace

IdxArray read_idx(std::istream& in) { return read_idx_named(in, ""); }

IdxArray read_idx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  return read_idx_named(in, path.string() + ": ");
}

void write_idx(std::ostream& out, const IdxArray& a) {
  std::size_t total = 1;
  for (auto d : a.dims) total *= d;
  if (a.dims.empty() || a.dims.size() > 255 || total != a.data.size())
    throw ParameterError("write_idx: dimensions do not match data length");
  write_be32(out, a.magic());
  for (auto d : a.dims) write_be32(out, d);
  out.write(reinterpret_cast<const char*>(a.data.data()), static_cast<std::streamsize>(a.data.size()));
}

void write_idx(const std::filesystem::path& path, const IdxArray& a) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  write_idx(out, a);
}

LabeledDataset mnist_load(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const IdxArray img = read_idx(images);
  const IdxArray lab = read_idx(labels);
  if (img.magic() != kIdxImagesMagic) throw FormatError(images.string() + ": expected a 3-dimensional image array", 3);
  if (lab.magic() != kIdxLabelsMagic) throw FormatError(labels.string() + ": expected a 1-dimensional label array", 3);
  if (img.dims[0] != lab.dims[0])
    throw FormatError("label count " + std::to_string(lab.dims[0]) + " differs from image count " +
                          std::to_string(img.dims[0]),
                      4);
  const std::size_t n = img.dims[0];
  const std::size_t pixels = std::size_t{img.dims[1]} * img.dims[2];
  LabeledDataset ds;
  ds.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(pixels));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t p = 0; p < pixels; ++p)
      ds.inputs(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(p)) = img.data[r * pixels + p] / 255.0;
  int max_label = 0;
  for (std::size_t r = 0; r < n; ++r) {
    ds.labels.push_back(lab.data[r]);
    ds.origin.push_back(r);
    max_label = std::max(max_label, static_cast<int>(lab.data[r]));
  }
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  return ds;
}

void mnist_save(const LabeledDataset& ds, std::uint32_t rows, std::uint32_t cols, const std::filesystem::path& images,
                const std::filesystem::path& labels) {
  if (ds.dim() != std::size_t{rows} * cols) throw ParameterError("mnist_save: rows*cols differs from input width");
  IdxArray img{{static_cast<std::uint32_t>(ds.size()), rows, cols}, {}};
  img.data.reserve(ds.size() * ds.dim());
  for (Eigen::Index r = 0; r < ds.inputs.rows(); ++r)
    for (Eigen::Index c = 0; c < ds.inputs.cols(); ++c)
      img.data.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(ds.inputs(r, c), 0.0, 1.0) * 255.0)));
  IdxArray lab{{static_cast<std::uint32_t>(ds.size())}, {}};
  for (int y : ds.labels) {
    if (y < 0 || y > 255) throw ParameterError("mnist_save: label does not fit in a byte");
    lab.data.push_back(static_cast<std::uint8_t>(y));
  }
  write_idx(images, img);
  write_idx(labels, lab);
}

}  // namespace fsfl
