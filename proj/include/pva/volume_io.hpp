#pragma once

#include "pva/volume.hpp"

#include <filesystem>
#include <string>
#include <variant>

namespace pva {

/// `.vvol` container: "VVOL", u32 LE header length, JSON header, raw LE payload.
enum class DType { f32, u8 };

struct VolumeHeader {
  Dims dims;
  Spacing spacing = Spacing::Ones();
  DType dtype = DType::f32;
  Role role = Role::image;

  std::size_t payload_bytes() const { return dims.voxels() * (dtype == DType::f32 ? 4 : 1); }
};

using AnyVolume = std::variant<VolumeF, Mask>;

void write_volume(const VolumeF& v, const std::filesystem::path& path);
void write_volume(const Mask& v, const std::filesystem::path& path);

AnyVolume read_volume(const std::filesystem::path& path);
VolumeHeader read_volume_header(const std::filesystem::path& path);

/// Typed readers; a dtype mismatch raises FormatError.
VolumeF read_volume_f32(const std::filesystem::path& path);
Mask read_mask(const std::filesystem::path& path);

}  // namespace pva
