#include "ptnet/container.hpp"

#include <bit>
#include <cctype>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "ptnet/errors.hpp"

namespace ptnet {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'P', 'T', 'N', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

template <typename T>
void append_raw(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T read_raw(const std::uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

}  // namespace

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  throw FormatError("unknown dtype");
}

std::vector<std::uint8_t> encode_container(const Shape& shape, const std::vector<double>& values, DType dtype) {
  if (shape.size() > 255) throw ShapeError("container: rank above 255");
  if (shape_numel(shape) != values.size()) throw ShapeError("container: value count does not match shape");
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(static_cast<std::uint8_t>(dtype));
  out.push_back(static_cast<std::uint8_t>(shape.size()));
  for (auto d : shape) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw ShapeError("container: dimension exceeds u32");
    put_u32(out, static_cast<std::uint32_t>(d));
  }
  out.reserve(out.size() + values.size() * dtype_size(dtype));
  for (double v : values) {
    switch (dtype) {
      case DType::f32: append_raw(out, static_cast<float>(v)); break;
      case DType::f64: append_raw(out, v); break;
      case DType::u8:
        if (!(v >= 0.0 && v <= 255.0) || v != static_cast<double>(static_cast<std::uint8_t>(v))) {
          throw FormatError("container: value not representable as u8");
        }
        out.push_back(static_cast<std::uint8_t>(v));
        break;
    }
  }
  return out;
}

ContainerData decode_container(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 6 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("container: bad magic");
  const auto code = bytes[4];
  if (code > 2) throw FormatError("container: unknown dtype code " + std::to_string(code));
  ContainerData d;
  d.dtype = static_cast<DType>(code);
  const std::size_t rank = bytes[5];
  std::size_t pos = 6;
  if (bytes.size() < pos + 4 * rank) throw FormatError("container: truncated header");
  std::size_t numel = 1;
  for (std::size_t i = 0; i < rank; ++i, pos += 4) {
    const std::size_t dim = get_u32(bytes.data() + pos);
    if (dim != 0 && numel > std::numeric_limits<std::size_t>::max() / 64 / dim) throw FormatError("container: size overflow");
    numel *= dim;
    d.shape.push_back(dim);
  }
  const std::size_t width = dtype_size(d.dtype);
  if (bytes.size() - pos != numel * width) {
    throw FormatError("container: payload is " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                      std::to_string(numel * width));
  }
  d.values.resize(numel);
  const std::uint8_t* p = bytes.data() + pos;
  for (std::size_t i = 0; i < numel; ++i, p += width) {
    switch (d.dtype) {
      case DType::f32: d.values[i] = read_raw<float>(p); break;
      case DType::f64: d.values[i] = read_raw<double>(p); break;
      case DType::u8: d.values[i] = *p; break;
    }
  }
  return d;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_container(const std::filesystem::path& path, const Tensor& t, DType dtype) {
  write_file_bytes(path, encode_container(t.shape(), t.to_vector(), dtype));
}

void write_container(const std::filesystem::path& path, const ContainerData& data) {
  write_file_bytes(path, encode_container(data.shape, data.values, data.dtype));
}

ContainerData read_container(const std::filesystem::path& path) { return decode_container(read_file_bytes(path)); }

Tensor read_tensor(const std::filesystem::path& path) {
  auto d = read_container(path);
  return Tensor::from(d.shape, std::move(d.values));
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  if (image.pixels.size() != image.width * image.height) throw ShapeError("pgm: pixel count mismatch");
  const std::string header = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), image.pixels.begin(), image.pixels.end());
  write_file_bytes(path, bytes);
}

GrayImage read_pgm(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::size_t pos = 0;
  auto next_token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) tok.push_back(static_cast<char>(bytes[pos++]));
    if (tok.empty()) throw FormatError("pgm: truncated header in " + path.string());
    return tok;
  };
  if (next_token() != "P5") throw FormatError("pgm: not a binary P5 file: " + path.string());
  GrayImage img;
  try {
    img.width = std::stoul(next_token());
    img.height = std::stoul(next_token());
    if (std::stoul(next_token()) != 255) throw FormatError("pgm: maxval must be 255");
  } catch (const std::logic_error&) {
    throw FormatError("pgm: malformed header in " + path.string());
  }
  ++pos;  // single whitespace after maxval
  if (bytes.size() < pos || bytes.size() - pos != img.width * img.height) throw FormatError("pgm: payload size mismatch");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return img;
}

void write_mask_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& mask, std::size_t height,
                    std::size_t width) {
  GrayImage img{width, height, std::vector<std::uint8_t>(mask.size())};
  for (std::size_t i = 0; i < mask.size(); ++i) img.pixels[i] = mask[i] ? 255 : 0;
  write_pgm(path, img);
}

std::vector<std::uint8_t> read_mask_pgm(const std::filesystem::path& path, std::size_t* height, std::size_t* width) {
  const auto img = read_pgm(path);
  if (height) *height = img.height;
  if (width) *width = img.width;
  std::vector<std::uint8_t> mask(img.pixels.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (img.pixels[i] != 0 && img.pixels[i] != 255) throw FormatError("mask: pixel values must be 0 or 255");
    mask[i] = img.pixels[i] ? 1 : 0;
  }
  return mask;
}

}  // namespace ptnet
