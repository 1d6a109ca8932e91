#pragma once

// PTN1 tensor container:
//   "PTN1" | u8 dtype (0=f32, 1=f64, 2=u8) | u8 rank | rank x u32 LE dims | LE payload

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ptnet/tensor.hpp"

namespace ptnet {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

std::size_t dtype_size(DType t);

/// Decoded container contents; values widened to double.
struct ContainerData {
  DType dtype = DType::f64;
  Shape shape;
  std::vector<double> values;
};

std::vector<std::uint8_t> encode_container(const Shape& shape, const std::vector<double>& values, DType dtype);
ContainerData decode_container(const std::vector<std::uint8_t>& bytes);

void write_container(const std::filesystem::path& path, const Tensor& t, DType dtype = DType::f64);
void write_container(const std::filesystem::path& path, const ContainerData& data);
ContainerData read_container(const std::filesystem::path& path);
Tensor read_tensor(const std::filesystem::path& path);

/// Binary PGM (P5, maxval 255).
struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

void write_pgm(const std::filesystem::path& path, const GrayImage& image);
GrayImage read_pgm(const std::filesystem::path& path);

/// 0/1 mask stored as 0/255.
void write_mask_pgm(const std::filesystem::path& path, const std::vector<std::uint8_t>& mask, std::size_t height,
                    std::size_t width);
std::vector<std::uint8_t> read_mask_pgm(const std::filesystem::path& path, std::size_t* height = nullptr,
                                        std::size_t* width = nullptr);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace ptnet
