#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

namespace pva {

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LengthError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Voxel counts along (h, w, d). Storage is row-major with h slowest.
struct Dims {
  int h = 0;
  int w = 0;
  int d = 0;

  constexpr std::size_t voxels() const {
    return static_cast<std::size_t>(h) * static_cast<std::size_t>(w) *
           static_cast<std::size_t>(d);
  }
  constexpr std::size_t index(int ih, int iw, int id) const {
    return (static_cast<std::size_t>(ih) * static_cast<std::size_t>(w) +
            static_cast<std::size_t>(iw)) *
               static_cast<std::size_t>(d) +
           static_cast<std::size_t>(id);
  }
  constexpr bool contains(int ih, int iw, int id) const {
    return ih >= 0 && iw >= 0 && id >= 0 && ih < h && iw < w && id < d;
  }
  constexpr bool positive() const { return h > 0 && w > 0 && d > 0; }
  friend constexpr bool operator==(const Dims&, const Dims&) = default;
};

inline std::string to_string(const Dims& dims) {
  return std::to_string(dims.h) + "x" + std::to_string(dims.w) + "x" +
         std::to_string(dims.d);
}

/// Millimetres per voxel along (h, w, d).
using Spacing = Eigen::Vector3d;

enum class Role { image, mask, logit, pseudo_label };

std::string to_string(Role role);
Role parse_role(const std::string& name);

/// Dense 3D scalar grid with spacing metadata.
///
/// Values of `logit` and `pseudo_label` volumes must lie in [0, 1]; `mask`
/// volumes hold exactly 0 or 1. These constraints are checked by
/// `validate()`, which the constructors and the file reader call.
template <typename Scalar>
class Volume {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Volume() = default;

  Volume(Dims dims, Spacing spacing, Role role, Scalar fill = Scalar(0))
      : dims_(dims), spacing_(std::move(spacing)), role_(role) {
    check_geometry();
    data_ = Array::Constant(static_cast<Eigen::Index>(dims_.voxels()), fill);
    validate();
  }

  Volume(Dims dims, Spacing spacing, Role role, Array data)
      : dims_(dims), spacing_(std::move(spacing)), role_(role), data_(std::move(data)) {
    check_geometry();
    if (static_cast<std::size_t>(data_.size()) != dims_.voxels())
      throw ValidationError("volume data length " + std::to_string(data_.size()) +
                            " does not match dims " + to_string(dims_));
    validate();
  }

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  Role role() const { return role_; }
  std::size_t size() const { return dims_.voxels(); }

  const Array& data() const { return data_; }
  Array& data() { return data_; }

  Scalar operator()(int h, int w, int d) const {
    return data_[static_cast<Eigen::Index>(dims_.index(h, w, d))];
  }
  Scalar& operator()(int h, int w, int d) {
    return data_[static_cast<Eigen::Index>(dims_.index(h, w, d))];
  }
  Scalar operator[](std::size_t i) const { return data_[static_cast<Eigen::Index>(i)]; }
  Scalar& operator[](std::size_t i) { return data_[static_cast<Eigen::Index>(i)]; }

  /// Same geometry, different role; contents are revalidated for the role.
  Volume with_role(Role role) const { return Volume(dims_, spacing_, role, data_); }

  template <typename To>
  Volume<To> cast(Role role) const {
    return Volume<To>(dims_, spacing_, role, data_.template cast<To>().eval());
  }
  template <typename To>
  Volume<To> cast() const {
    return cast<To>(role_);
  }

  void validate() const {
    switch (role_) {
      case Role::mask:
        for (Eigen::Index i = 0; i < data_.size(); ++i)
          if (data_[i] != Scalar(0) && data_[i] != Scalar(1))
            throw ValidationError("mask volume holds non-binary value at index " +
                                  std::to_string(i));
        break;
      case Role::logit:
      case Role::pseudo_label:
        for (Eigen::Index i = 0; i < data_.size(); ++i)
          if (!(data_[i] >= Scalar(0) && data_[i] <= Scalar(1)))
            throw ValidationError(to_string(role_) + " volume value outside [0,1] at index " +
                                  std::to_string(i));
        break;
      case Role::image:
        for (Eigen::Index i = 0; i < data_.size(); ++i)
          if (!std::isfinite(static_cast<double>(data_[i])))
            throw ValidationError("image volume holds non-finite value at index " +
                                  std::to_string(i));
        break;
    }
  }

  bool same_geometry(const Volume& other) const { return dims_ == other.dims_; }

  friend bool operator==(const Volume& a, const Volume& b) {
    return a.dims_ == b.dims_ && a.spacing_ == b.spacing_ && a.role_ == b.role_ &&
           a.data_.size() == b.data_.size() && (a.data_ == b.data_).all();
  }

 private:
  void check_geometry() const {
    if (!dims_.positive())
      throw ValidationError("volume dims must be positive, got " + to_string(dims_));
    if (!(spacing_.array() > 0.0).all() || !spacing_.allFinite())
      throw ValidationError("volume spacing must be strictly positive");
  }

  Dims dims_{};
  Spacing spacing_ = Spacing::Ones();
  Role role_ = Role::image;
  Array data_;
};

using VolumeF = Volume<float>;
using Mask = Volume<std::uint8_t>;

/// Voxel is 1 iff value > threshold (strict).
template <typename Scalar>
Mask binarize(const Volume<Scalar>& v, double threshold = 0.5) {
  Mask::Array out(static_cast<Eigen::Index>(v.size()));
  for (Eigen::Index i = 0; i < out.size(); ++i)
    out[i] = static_cast<double>(v.data()[i]) > threshold ? 1 : 0;
  return Mask(v.dims(), v.spacing(), Role::mask, std::move(out));
}

inline std::size_t count_foreground(const Mask& m) {
  return static_cast<std::size_t>((m.data() != 0).count());
}

/// Partial vessel annotation: binary mask of labeled vessel voxels.
struct PvaLabel {
  Mask mask;
  double labeled_fraction = 0.0;
  /// Set when the requested labeled fraction could not be honoured.
  bool warning = false;

  PvaLabel() = default;
  PvaLabel(Mask m, double fraction, bool warn = false)
      : mask(std::move(m)), labeled_fraction(fraction), warning(warn) {
    validate();
  }

  void validate() const {
    if (mask.role() != Role::mask) throw ValidationError("PVA label must be a mask volume");
    mask.validate();
    if (count_foreground(mask) == 0)
      throw ValidationError("PVA label has no labeled voxels");
  }
};

}  // namespace pva
