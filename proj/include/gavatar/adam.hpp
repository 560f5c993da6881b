#pragma once

// Bias-corrected Adam over named parameter groups. Each group holds one or
// more (parameter, gradient) vector pairs sharing a learning rate.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace gavatar {

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Moments and counters without the parameter bindings; what a checkpoint
// stores.
struct AdamState {
    struct Slot {
        std::vector<double> m, v;
    };
    struct Group {
        std::string name;
        double lr = 0.0;
        std::vector<Slot> slots;
    };
    int64_t steps = 0;
    int64_t skipped = 0;
    std::vector<Group> groups;
};

class Adam {
public:
    struct Slot {
        std::vector<double>* param = nullptr;
        std::vector<double>* grad = nullptr;
        std::vector<double> m, v;
    };
    struct Group {
        std::string name;
        double lr = 0.0;
        std::vector<Slot> slots;
    };

    explicit Adam(AdamHyper hyper = {}) : hyper_(hyper) {}

    void add_group(std::string name, double lr, std::vector<std::pair<std::vector<double>*, std::vector<double>*>> slots);

    // Applies one update to every group. If any gradient is non-finite no
    // parameter moves, the skip counter increments and false is returned.
    bool step();

    void zero_grad();

    Group& group(const std::string& name);
    const std::vector<Group>& groups() const { return groups_; }
    std::vector<Group>& groups() { return groups_; }
    int64_t steps() const { return step_; }
    void set_steps(int64_t s) { step_ = s; }
    int64_t skipped() const { return skipped_; }
    const AdamHyper& hyper() const { return hyper_; }

    // Reorders the moments of one slot after its parameter vector was
    // resized: row i of the new layout takes row source[i] of the old one
    // (-1 = fresh zero moments). width = values per row.
    void remap(const std::string& group, size_t slot, const std::vector<int64_t>& source, size_t width);

    AdamState state() const;
    // Groups and slot sizes must match the bound parameters.
    void load_state(const AdamState& state);

private:
    AdamHyper hyper_;
    std::vector<Group> groups_;
    int64_t step_ = 0;
    int64_t skipped_ = 0;
};

} // namespace gavatar
