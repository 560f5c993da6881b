#include "gavatar/guidance.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <random>

#include <httplib.h>

#include "gavatar/errors.hpp"

namespace gavatar::guidance {

static_assert(std::endian::native == std::endian::little, "wire format assumes a little-endian host");

void GuidanceContext::validate(bool need_prompt) const
{
    if (!(t_min > 0.0 && t_min <= t_max && t_max < 1.0))
        throw ParameterError("guidance: noise range must satisfy 0 < t_min <= t_max < 1");
    if (need_prompt && prompt.empty()) throw ParameterError("guidance: prompt must not be empty");
}

Image photometric_grad(const Image& image, const Image& reference)
{
    require_same_shape(image, reference, "photometric_grad");
    Image g(image.width, image.height, image.channels);
    const double scale = 2.0 / static_cast<double>(image.size());
    for (size_t i = 0; i < image.size(); ++i) g.data[i] = scale * (image.data[i] - reference.data[i]);
    return g;
}

double mean_squared_error(const Image& image, const Image& reference)
{
    require_same_shape(image, reference, "mean_squared_error");
    double s = 0.0;
    for (size_t i = 0; i < image.size(); ++i) {
        const double d = image.data[i] - reference.data[i];
        s += d * d;
    }
    return image.size() ? s / static_cast<double>(image.size()) : 0.0;
}

double sds_weight(double t)
{
    if (!(t > 0.0 && t < 1.0)) throw ParameterError("sds_weight: t must lie in (0, 1)");
    return t * t;
}

Image PhotometricGuidance::gradient(const Image& image, const GuidanceContext& ctx)
{
    const Image ref = references_(ctx);
    last_loss_ = mean_squared_error(image, ref);
    return photometric_grad(image, ref);
}

namespace {

class Writer {
public:
    explicit Writer(size_t reserve) { out_.reserve(reserve); }
    template <class T>
    void put(T v)
    {
        char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        out_.append(b, sizeof(T));
    }
    void bytes(std::string_view s) { out_.append(s); }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class Reader {
public:
    explicit Reader(std::string_view in) : in_(in) {}
    template <class T>
    T get()
    {
        need(sizeof(T));
        T v;
        std::memcpy(&v, in_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string_view bytes(size_t n)
    {
        need(n);
        const auto s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    size_t remaining() const { return in_.size() - pos_; }

private:
    void need(size_t n) const
    {
        if (in_.size() - pos_ < n) throw ProtocolError("protocol: truncated message");
    }
    std::string_view in_;
    size_t pos_ = 0;
};

void check_shape(uint32_t h, uint32_t w, uint32_t c, size_t remaining)
{
    if (h == 0 || w == 0 || c == 0) throw ProtocolError("protocol: empty image shape");
    const uint64_t n = uint64_t(h) * w * c;
    if (n > remaining / 4 || n * 4 != remaining) throw ProtocolError("protocol: payload size does not match shape");
}

} // namespace

size_t request_size(size_t prompt_bytes, int width, int height, int channels)
{
    return 4 + 4 + 4 + prompt_bytes + 1 + 8 + 4 + 4 + 4 + 4 + 4 + 4 * static_cast<size_t>(width) * height * channels;
}

std::string encode_request(const Image& image, const GuidanceContext& ctx)
{
    if (image.channels != kProtocolChannels) throw ParameterError("encode_request: image must have 3 channels");
    Writer w(request_size(ctx.prompt.size(), image.width, image.height));
    w.bytes("GSDS");
    w.put<uint32_t>(kProtocolVersion);
    w.put<uint32_t>(static_cast<uint32_t>(ctx.prompt.size()));
    w.bytes(ctx.prompt);
    w.put<uint8_t>(static_cast<uint8_t>(ctx.kind));
    w.put<uint64_t>(ctx.seed);
    w.put<float>(static_cast<float>(ctx.t_min));
    w.put<float>(static_cast<float>(ctx.t_max));
    w.put<uint32_t>(static_cast<uint32_t>(image.height));
    w.put<uint32_t>(static_cast<uint32_t>(image.width));
    w.put<uint32_t>(static_cast<uint32_t>(image.channels));
    for (double v : image.data) {
        if (!std::isfinite(v)) throw NumericError("encode_request: non-finite pixel");
        w.put<float>(static_cast<float>(std::clamp(v, 0.0, 1.0)));
    }
    return w.take();
}

SdsRequest decode_request(std::string_view bytes)
{
    Reader r(bytes);
    if (bytes.size() < 4 || r.bytes(4) != "GSDS") throw ProtocolError("bad magic");
    if (r.get<uint32_t>() != kProtocolVersion) throw ProtocolError("unsupported version");
    SdsRequest q;
    const uint32_t len = r.get<uint32_t>();
    q.prompt = std::string(r.bytes(len));
    const uint8_t kind = r.get<uint8_t>();
    if (kind > 1) throw ProtocolError("protocol: unknown channel kind");
    q.kind = static_cast<Channel>(kind);
    q.seed = r.get<uint64_t>();
    q.t_min = r.get<float>();
    q.t_max = r.get<float>();
    q.height = r.get<uint32_t>();
    q.width = r.get<uint32_t>();
    q.channels = r.get<uint32_t>();
    check_shape(q.height, q.width, q.channels, r.remaining());
    q.pixels.resize(size_t(q.height) * q.width * q.channels);
    for (auto& p : q.pixels) p = r.get<float>();
    return q;
}

std::string encode_response(const Image& gradient)
{
    Writer w(20 + 4 * gradient.size());
    w.bytes("GSDG");
    w.put<uint32_t>(kProtocolVersion);
    w.put<uint32_t>(static_cast<uint32_t>(gradient.height));
    w.put<uint32_t>(static_cast<uint32_t>(gradient.width));
    w.put<uint32_t>(static_cast<uint32_t>(gradient.channels));
    for (double v : gradient.data) w.put<float>(static_cast<float>(v));
    return w.take();
}

Image decode_response(std::string_view bytes, int width, int height, int channels)
{
    Reader r(bytes);
    if (bytes.size() < 4 || r.bytes(4) != "GSDG") throw ProtocolError("bad magic");
    if (r.get<uint32_t>() != kProtocolVersion) throw ProtocolError("unsupported version");
    const uint32_t h = r.get<uint32_t>(), w = r.get<uint32_t>(), c = r.get<uint32_t>();
    if (int64_t(h) != height || int64_t(w) != width || int64_t(c) != channels)
        throw ProtocolError("protocol: response shape does not match the request");
    check_shape(h, w, c, r.remaining());
    Image g(width, height, channels);
    for (auto& v : g.data) {
        v = r.get<float>();
        if (!std::isfinite(v)) throw ProtocolError("protocol: non-finite gradient value");
    }
    return g;
}

RemoteSdsGuidance::RemoteSdsGuidance(std::string endpoint, RetryPolicy retry, double timeout_seconds)
    : endpoint_(std::move(endpoint)), retry_(retry), timeout_(timeout_seconds)
{
    if (endpoint_.empty()) throw ParameterError("remote guidance: empty endpoint");
    if (retry_.attempts < 1) throw ParameterError("remote guidance: attempts must be >= 1");
}

Image RemoteSdsGuidance::gradient(const Image& image, const GuidanceContext& ctx)
{
    ctx.validate(true);
    const std::string body = encode_request(image, ctx);
    httplib::Client client(endpoint_);
    const auto t = std::chrono::duration<double>(timeout_);
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(t));
    client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(t));
    client.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(t));

    auto wait = retry_.backoff;
    std::string last_error;
    for (int attempt = 1; attempt <= retry_.attempts; ++attempt) {
        last_attempts_ = attempt;
        auto res = client.Post("/v1/sds-grad", body, "application/octet-stream");
        if (res) {
            if (res->status == 200) return decode_response(res->body, image.width, image.height, image.channels);
            throw GuidanceError(res->status, res->body);
        }
        last_error = httplib::to_string(res.error());
        if (attempt < retry_.attempts) {
            std::this_thread::sleep_for(wait);
            wait *= 2;
        }
    }
    throw TransientError("remote guidance: " + endpoint_ + " unreachable after " + std::to_string(retry_.attempts) +
                         " attempts (" + last_error + ")");
}

std::pair<int, std::string> mock_handle(const MockConfig& config, std::string_view body)
{
    SdsRequest q;
    try {
        q = decode_request(body);
    } catch (const ProtocolError& e) {
        return {400, e.what()};
    }
    if (q.channels != kProtocolChannels || q.width > uint32_t(config.max_side) || q.height > uint32_t(config.max_side))
        return {422, "unsupported shape"};
    if (!(q.t_min > 0.0f && q.t_min <= q.t_max && q.t_max < 1.0f)) return {400, "bad noise range"};

    Image img(int(q.width), int(q.height), int(q.channels));
    for (size_t i = 0; i < img.size(); ++i) img.data[i] = q.pixels[i];
    Image grad;
    if (config.reference) {
        if (!config.reference->same_shape(img)) return {422, "shape differs from the reference image"};
        grad = photometric_grad(img, *config.reference);
    } else {
        std::mt19937_64 rng(q.seed);
        const double t = std::uniform_real_distribution<double>(q.t_min, q.t_max)(rng);
        const double w = sds_weight(std::clamp(t, 1e-6, 1.0 - 1e-6));
        grad = Image(img.width, img.height, img.channels);
        for (size_t i = 0; i < img.size(); ++i) grad.data[i] = w * (img.data[i] - 0.5);
    }
    return {200, encode_response(grad)};
}

struct MockSdsServer::Impl {
    MockConfig config;
    httplib::Server server;
    std::thread thread;
    std::atomic<size_t> requests{0};
};

MockSdsServer::MockSdsServer(MockConfig config) : impl_(std::make_unique<Impl>())
{
    impl_->config = std::move(config);
    Impl* im = impl_.get();
    im->server.Post("/v1/sds-grad", [im](const httplib::Request& req, httplib::Response& res) {
        ++im->requests;
        auto [status, body] = mock_handle(im->config, req.body);
        res.status = status;
        res.set_content(body, status == 200 ? "application/octet-stream" : "text/plain; charset=utf-8");
    });
}

MockSdsServer::~MockSdsServer() { stop(); }

int MockSdsServer::start(const std::string& host, int port)
{
    const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw TransientError("mock server: cannot bind " + host + ":" + std::to_string(port));
    impl_->thread = std::thread([im = impl_.get()] { im->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
    return bound;
}

void MockSdsServer::run(const std::string& host, int port)
{
    if (!impl_->server.listen(host, port))
        throw TransientError("mock server: cannot listen on " + host + ":" + std::to_string(port));
}

void MockSdsServer::stop()
{
    if (!impl_) return;
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

size_t MockSdsServer::requests() const { return impl_->requests.load(); }

} // namespace gavatar::guidance
