#pragma once

// Image-space supervision behind one interface: a photometric oracle and a
// client for a remote score-distillation service, plus an in-process mock of
// that service.

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "gavatar/image.hpp"

namespace gavatar::guidance {

enum class Channel : uint8_t { Rgb = 0, Normal = 1 };

struct GuidanceContext {
    std::string prompt;
    Channel kind = Channel::Rgb;
    double t_min = 0.02;
    double t_max = 0.98;
    uint64_t seed = 0;
    int view = -1; // training view index, used by reference-based guidance

    void validate(bool need_prompt) const;
};

// 2 (I - I_ref) / (W H C), the gradient of the mean squared error.
Image photometric_grad(const Image& image, const Image& reference);
double mean_squared_error(const Image& image, const Image& reference);

// Noise-level weight of the built-in mock schedule: w(t) = t^2.
double sds_weight(double t);

class Guidance {
public:
    virtual ~Guidance() = default;
    virtual std::string name() const = 0;
    // dL/dI with the shape of image; all values finite.
    virtual Image gradient(const Image& image, const GuidanceContext& ctx) = 0;
    // The loss implied by the last gradient, if the method defines one.
    virtual std::optional<double> last_loss() const { return std::nullopt; }
};

class PhotometricGuidance : public Guidance {
public:
    using ReferenceFn = std::function<Image(const GuidanceContext&)>;
    explicit PhotometricGuidance(ReferenceFn references) : references_(std::move(references)) {}

    std::string name() const override { return "photometric"; }
    Image gradient(const Image& image, const GuidanceContext& ctx) override;
    std::optional<double> last_loss() const override { return last_loss_; }

private:
    ReferenceFn references_;
    std::optional<double> last_loss_;
};

// Wire protocol, little-endian.
//   request:  "GSDS" | u32 version | u32 prompt_len | prompt | u8 kind | u64 seed |
//             f32 t_min | f32 t_max | u32 height | u32 width | u32 channels | f32 data
//   response: "GSDG" | u32 version | u32 height | u32 width | u32 channels | f32 data
constexpr uint32_t kProtocolVersion = 1;
constexpr int kProtocolChannels = 3;

struct SdsRequest {
    std::string prompt;
    Channel kind = Channel::Rgb;
    uint64_t seed = 0;
    float t_min = 0.0f, t_max = 0.0f;
    uint32_t height = 0, width = 0, channels = 0;
    std::vector<float> pixels;
};

size_t request_size(size_t prompt_bytes, int width, int height, int channels = kProtocolChannels);

// Pixels are clamped to [0, 1] and stored as f32.
std::string encode_request(const Image& image, const GuidanceContext& ctx);
SdsRequest decode_request(std::string_view bytes);
std::string encode_response(const Image& gradient);
// Throws ProtocolError unless the payload is well formed and has the expected shape.
Image decode_response(std::string_view bytes, int width, int height, int channels = kProtocolChannels);

struct RetryPolicy {
    int attempts = 3;
    std::chrono::milliseconds backoff{200}; // doubled after each failed attempt
};

class RemoteSdsGuidance : public Guidance {
public:
    explicit RemoteSdsGuidance(std::string endpoint, RetryPolicy retry = {}, double timeout_seconds = 60.0);

    std::string name() const override { return "remote"; }
    Image gradient(const Image& image, const GuidanceContext& ctx) override;
    int last_attempts() const { return last_attempts_; }

private:
    std::string endpoint_;
    RetryPolicy retry_;
    double timeout_;
    int last_attempts_ = 0;
};

// Stand-in for the diffusion service. With a reference image it echoes the
// photometric gradient; otherwise it returns w(t) (I - 0.5) with t drawn
// from [t_min, t_max] by the request seed.
struct MockConfig {
    std::optional<Image> reference;
    int max_side = 2048;
};

// Pure request handler: HTTP status and body.
std::pair<int, std::string> mock_handle(const MockConfig& config, std::string_view body);

class MockSdsServer {
public:
    explicit MockSdsServer(MockConfig config);
    ~MockSdsServer();
    MockSdsServer(const MockSdsServer&) = delete;
    MockSdsServer& operator=(const MockSdsServer&) = delete;

    // Starts serving on a background thread; port 0 picks a free port.
    // Returns the bound port.
    int start(const std::string& host = "127.0.0.1", int port = 0);
    // Serves on the calling thread until stop().
    void run(const std::string& host, int port);
    void stop();
    size_t requests() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace gavatar::guidance
