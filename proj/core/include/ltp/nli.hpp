#pragma once

#include <array>
#include <string>
#include <string_view>

#include "ltp/model.hpp"

namespace ltp {

// Declaration order is the tie-break order used by predict_label.
enum class Label { Entailment = 0, Contradiction = 1, Neutral = 2 };

inline constexpr std::array<Label, 3> kAllLabels = {Label::Entailment, Label::Contradiction, Label::Neutral};

std::string_view label_name(Label label);
Label parse_label(std::string_view name);  // throws FormatError

struct NliExample {
    TokenSeq premise;
    TokenSeq hypothesis;
    Label label = Label::Entailment;
    std::string language;

    friend bool operator==(const NliExample&, const NliExample&) = default;
};

}  // namespace ltp
