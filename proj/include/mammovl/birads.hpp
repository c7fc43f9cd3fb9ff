#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace mammovl {

/// BI-RADS assessment category, 0..6.
class BiradsLabel {
 public:
  constexpr BiradsLabel() = default;
  /// Throws DataValidationError outside 0..6.
  static BiradsLabel from_int(int value);
  static bool valid(int value) { return value >= 0 && value <= 6; }

  constexpr int value() const noexcept { return value_; }
  constexpr bool operator==(const BiradsLabel&) const = default;
  constexpr auto operator<=>(const BiradsLabel&) const = default;

 private:
  constexpr explicit BiradsLabel(int v) : value_(v) {}
  int value_ = 1;
};

enum class SchemeName { five, three };

/// Mapping from raw BI-RADS to training classes; entries of nullopt are
/// excluded from training and evaluation.
struct ClassScheme {
  SchemeName name = SchemeName::five;
  std::array<std::optional<int>, 7> table{};
  int num_classes = 0;
  std::array<const char*, 5> class_names{};

  static const ClassScheme& five();
  static const ClassScheme& three();
  /// Accepts "FIVE"/"THREE" (any case) and "5"/"3".
  static const ClassScheme& parse(std::string_view name);
  std::string label() const { return name == SchemeName::five ? "FIVE" : "THREE"; }
};

/// Class index under the scheme, or nullopt for EXCLUDED.
std::optional<int> map_label(BiradsLabel label, const ClassScheme& scheme);

/// Collapses a FIVE-scheme class index onto the THREE scheme.
int five_to_three(int five_class);

}  // namespace mammovl
