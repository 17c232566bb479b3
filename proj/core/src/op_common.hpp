#pragma once

// Internal helpers shared by the op implementations. Not installed.

#include <initializer_list>
#include <utility>

#include "absorbkit/tensor.hpp"

namespace absorb::opdetail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> ins) {
    for (const Tensor* x : ins)
        if (x->impl()->requires_grad) return true;
    return false;
}

inline bool tracked(Tape* t, std::initializer_list<const Tensor*> ins) {
    return t != nullptr && any_requires_grad(ins);
}

inline Tensor make_out(Tape* t, Shape shape, bool track) {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->data.resize(static_cast<size_t>(shape_numel(shape)));
    impl->shape = std::move(shape);
    impl->requires_grad = track;
    impl->leaf = false;
    if (t != nullptr) {
        impl->tape = t;
        impl->epoch = t->epoch();
    }
    return Tensor::wrap(impl);
}

}  // namespace absorb::opdetail
