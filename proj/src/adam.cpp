#include "gavatar/adam.hpp"

#include <cmath>

#include "gavatar/errors.hpp"

namespace gavatar {

void Adam::add_group(std::string name, double lr,
                     std::vector<std::pair<std::vector<double>*, std::vector<double>*>> slots)
{
    if (!(lr >= 0.0)) throw ParameterError("adam: learning rate must be non-negative");
    Group g;
    g.name = std::move(name);
    g.lr = lr;
    for (auto [p, gr] : slots) {
        if (!p || !gr) throw ParameterError("adam: null slot");
        Slot s;
        s.param = p;
        s.grad = gr;
        s.m.assign(p->size(), 0.0);
        s.v.assign(p->size(), 0.0);
        g.slots.push_back(std::move(s));
    }
    groups_.push_back(std::move(g));
}

Adam::Group& Adam::group(const std::string& name)
{
    for (auto& g : groups_)
        if (g.name == name) return g;
    throw ParameterError("adam: unknown group " + name);
}

void Adam::zero_grad()
{
    for (auto& g : groups_)
        for (auto& s : g.slots) std::fill(s.grad->begin(), s.grad->end(), 0.0);
}

bool Adam::step()
{
    for (const auto& g : groups_)
        for (const auto& s : g.slots) {
            if (s.grad->size() != s.param->size() || s.m.size() != s.param->size())
                throw ParameterError("adam: slot size mismatch in group " + g.name);
            for (double v : *s.grad)
                if (!std::isfinite(v)) {
                    ++skipped_;
                    return false;
                }
        }
    ++step_;
    const double c1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(step_));
    const double b1 = hyper_.beta1, b2 = hyper_.beta2;
    for (auto& g : groups_) {
        if (g.lr == 0.0) continue;
        for (auto& s : g.slots) {
            double* p = s.param->data();
            const double* gr = s.grad->data();
            double* m = s.m.data();
            double* v = s.v.data();
            const size_t n = s.param->size();
            for (size_t i = 0; i < n; ++i) {
                m[i] = b1 * m[i] + (1.0 - b1) * gr[i];
                v[i] = b2 * v[i] + (1.0 - b2) * gr[i] * gr[i];
                p[i] -= g.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + hyper_.eps);
            }
        }
    }
    return true;
}

void Adam::remap(const std::string& name, size_t slot, const std::vector<int64_t>& source, size_t width)
{
    Slot& s = group(name).slots.at(slot);
    std::vector<double> m(source.size() * width, 0.0), v(source.size() * width, 0.0);
    for (size_t i = 0; i < source.size(); ++i) {
        if (source[i] < 0) continue;
        for (size_t k = 0; k < width; ++k) {
            m[i * width + k] = s.m[static_cast<size_t>(source[i]) * width + k];
            v[i * width + k] = s.v[static_cast<size_t>(source[i]) * width + k];
        }
    }
    s.m = std::move(m);
    s.v = std::move(v);
}

AdamState Adam::state() const
{
    AdamState st;
    st.steps = step_;
    st.skipped = skipped_;
    for (const auto& g : groups_) {
        AdamState::Group sg{g.name, g.lr, {}};
        for (const auto& s : g.slots) sg.slots.push_back({s.m, s.v});
        st.groups.push_back(std::move(sg));
    }
    return st;
}

void Adam::load_state(const AdamState& st)
{
    if (st.groups.size() != groups_.size()) throw ParameterError("adam: group count mismatch");
    for (size_t i = 0; i < groups_.size(); ++i) {
        const auto& sg = st.groups[i];
        const auto& g = groups_[i];
        if (sg.name != g.name || sg.slots.size() != g.slots.size())
            throw ParameterError("adam: group '" + sg.name + "' does not match '" + g.name + "'");
        for (size_t k = 0; k < g.slots.size(); ++k)
            if (sg.slots[k].m.size() != g.slots[k].param->size() || sg.slots[k].v.size() != g.slots[k].param->size())
                throw ParameterError("adam: moment size mismatch in group '" + g.name + "'");
    }
    for (size_t i = 0; i < groups_.size(); ++i) {
        groups_[i].lr = st.groups[i].lr;
        for (size_t k = 0; k < groups_[i].slots.size(); ++k) {
            groups_[i].slots[k].m = st.groups[i].slots[k].m;
            groups_[i].slots[k].v = st.groups[i].slots[k].v;
        }
    }
    step_ = st.steps;
    skipped_ = st.skipped;
}

} // namespace gavatar
