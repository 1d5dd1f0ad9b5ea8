#include "pva/volume_io.hpp"

#include "pva/binary_io.hpp"

#include "json.hpp"

#include <fstream>

namespace pva {

using nlohmann::json;

std::string to_string(Role role) {
  switch (role) {
    case Role::image: return "image";
    case Role::mask: return "mask";
    case Role::logit: return "logit";
    case Role::pseudo_label: return "pseudo_label";
  }
  return "image";
}

Role parse_role(const std::string& name) {
  if (name == "image") return Role::image;
  if (name == "mask") return Role::mask;
  if (name == "logit") return Role::logit;
  if (name == "pseudo_label") return Role::pseudo_label;
  throw FormatError("unknown volume role '" + name + "'");
}

namespace {

constexpr char kMagic[4] = {'V', 'V', 'O', 'L'};

json header_json(const VolumeHeader& h) {
  // Key order is fixed by nlohmann's sorted object map, so bytes are stable.
  return json{{"dims", {h.dims.h, h.dims.w, h.dims.d}},
              {"spacing", {h.spacing[0], h.spacing[1], h.spacing[2]}},
              {"dtype", h.dtype == DType::f32 ? "f32" : "u8"},
              {"role", to_string(h.role)}};
}

VolumeHeader parse_header(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("volume header is not valid JSON: ") + e.what());
  }
  VolumeHeader h;
  try {
    const auto& dims = j.at("dims");
    const auto& spacing = j.at("spacing");
    if (!dims.is_array() || dims.size() != 3 || !spacing.is_array() || spacing.size() != 3)
      throw FormatError("volume header dims/spacing must have three entries");
    h.dims = {dims[0].get<int>(), dims[1].get<int>(), dims[2].get<int>()};
    h.spacing = {spacing[0].get<double>(), spacing[1].get<double>(), spacing[2].get<double>()};
    const auto dtype = j.at("dtype").get<std::string>();
    if (dtype == "f32")
      h.dtype = DType::f32;
    else if (dtype == "u8")
      h.dtype = DType::u8;
    else
      throw FormatError("unknown dtype '" + dtype + "'");
    h.role = parse_role(j.at("role").get<std::string>());
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed volume header: ") + e.what());
  }
  if (!h.dims.positive()) throw FormatError("volume header dims must be positive");
  return h;
}

template <typename Scalar>
void write_impl(const Volume<Scalar>& v, DType dtype, const std::filesystem::path& path) {
  v.validate();
  VolumeHeader h{v.dims(), v.spacing(), dtype, v.role()};
  const std::string header = header_json(h).dump();

  std::string bytes;
  bytes.reserve(8 + header.size() + h.payload_bytes());
  bytes.append(kMagic, 4);
  put_u32(bytes, static_cast<std::uint32_t>(header.size()));
  bytes += header;
  if constexpr (std::is_same_v<Scalar, float>) {
    for (Eigen::Index i = 0; i < v.data().size(); ++i) put_f32(bytes, v.data()[i]);
  } else {
    for (Eigen::Index i = 0; i < v.data().size(); ++i)
      bytes.push_back(static_cast<char>(v.data()[i]));
  }
  write_file(path, bytes);
}

struct RawVolume {
  VolumeHeader header;
  std::string bytes;
  std::size_t payload_offset = 0;
};

RawVolume read_raw(const std::filesystem::path& path, bool header_only) {
  RawVolume raw;
  raw.bytes = read_file(path);
  const std::string& b = raw.bytes;
  if (b.size() < 8 || b.compare(0, 4, kMagic, 4) != 0)
    throw FormatError("not a .vvol file: " + path.string());
  const std::uint32_t n = get_u32(b, 4);
  if (b.size() < 8 + static_cast<std::size_t>(n))
    throw FormatError("truncated volume header in " + path.string());
  raw.header = parse_header(b.substr(8, n));
  raw.payload_offset = 8 + n;
  if (!header_only) {
    const std::size_t have = b.size() - raw.payload_offset;
    if (have != raw.header.payload_bytes())
      throw LengthError("volume payload is " + std::to_string(have) + " bytes, header " +
                        to_string(raw.header.dims) + " requires " +
                        std::to_string(raw.header.payload_bytes()));
  }
  return raw;
}

}  // namespace

void write_volume(const VolumeF& v, const std::filesystem::path& path) {
  write_impl(v, DType::f32, path);
}

void write_volume(const Mask& v, const std::filesystem::path& path) {
  write_impl(v, DType::u8, path);
}

VolumeHeader read_volume_header(const std::filesystem::path& path) {
  return read_raw(path, true).header;
}

AnyVolume read_volume(const std::filesystem::path& path) {
  const RawVolume raw = read_raw(path, false);
  const auto& h = raw.header;
  const auto n = static_cast<Eigen::Index>(h.dims.voxels());
  if (h.dtype == DType::f32) {
    VolumeF::Array data(n);
    for (Eigen::Index i = 0; i < n; ++i)
      data[i] = get_f32(raw.bytes, raw.payload_offset + 4 * static_cast<std::size_t>(i));
    return VolumeF(h.dims, h.spacing, h.role, std::move(data));
  }
  Mask::Array data(n);
  for (Eigen::Index i = 0; i < n; ++i)
    data[i] = static_cast<std::uint8_t>(raw.bytes[raw.payload_offset + static_cast<std::size_t>(i)]);
  return Mask(h.dims, h.spacing, h.role, std::move(data));
}

VolumeF read_volume_f32(const std::filesystem::path& path) {
  auto any = read_volume(path);
  if (auto* v = std::get_if<VolumeF>(&any)) return std::move(*v);
  throw FormatError("expected f32 volume in " + path.string());
}

Mask read_mask(const std::filesystem::path& path) {
  auto any = read_volume(path);
  if (auto* v = std::get_if<Mask>(&any)) {
    if (v->role() != Role::mask) throw FormatError("expected role=mask in " + path.string());
    return std::move(*v);
  }
  throw FormatError("expected u8 mask volume in " + path.string());
}

}  // namespace pva
