#include "mammovl/birads.hpp"

#include "mammovl/errors.hpp"

#include <algorithm>
#include <cctype>

namespace mammovl {

BiradsLabel BiradsLabel::from_int(int value) {
  if (!valid(value)) throw DataValidationError("invalid BI-RADS value " + std::to_string(value));
  return BiradsLabel(value);
}

const ClassScheme& ClassScheme::five() {
  // 1 -> negative, 2 -> benign, 0 -> incomplete, 4 -> suspicious,
  // 5 and 6 -> highly suspicious / malignant; 3 excluded.
  static const ClassScheme s{SchemeName::five,
                             {2, 0, 1, std::nullopt, 3, 4, 4},
                             5,
                             {"BI-RADS 1", "BI-RADS 2", "BI-RADS 0", "BI-RADS 4", "BI-RADS 5/6"}};
  return s;
}

const ClassScheme& ClassScheme::three() {
  static const ClassScheme s{SchemeName::three,
                             {1, 0, 0, std::nullopt, 2, 2, 2},
                             3,
                             {"BI-RADS 1-2", "BI-RADS 0", "BI-RADS 4-6", nullptr, nullptr}};
  return s;
}

const ClassScheme& ClassScheme::parse(std::string_view name) {
  std::string upper(name);
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  if (upper == "FIVE" || upper == "5") return five();
  if (upper == "THREE" || upper == "3") return three();
  throw ConfigError("unknown class scheme '" + std::string(name) + "' (expected FIVE or THREE)");
}

std::optional<int> map_label(BiradsLabel label, const ClassScheme& scheme) {
  return scheme.table[static_cast<std::size_t>(label.value())];
}

int five_to_three(int five_class) {
  static constexpr std::array<int, 5> kMap{0, 0, 1, 2, 2};
  if (five_class < 0 || five_class >= 5) throw ContractError("FIVE-scheme class index out of range");
  return kMap[static_cast<std::size_t>(five_class)];
}

}  // namespace mammovl
