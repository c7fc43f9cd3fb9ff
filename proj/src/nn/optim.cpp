#include "mammovl/nn/optim.hpp"

namespace mammovl::nn {

AdamW::AdamW(ParameterList params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.var.value().numel(), 0.0f);
    v_.emplace_back(p.var.value().numel(), 0.0f);
  }
}

void AdamW::step() {
  ++steps_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var& var = params_[i].var;
    if (!var.has_grad()) continue;
    auto& value = var.value().storage();
    const auto& grad = var.grad().storage();
    adamw_update<float>(std::span<float>(value), std::span<const float>(grad),
                        std::span<float>(m_[i]), std::span<float>(v_[i]), steps_, cfg_);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

}  // namespace mammovl::nn
