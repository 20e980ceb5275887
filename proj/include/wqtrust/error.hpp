#pragma once

#include <stdexcept>
#include <string>

namespace wqt {

/// Base class for every error raised by the library. The `kind()` string is
/// stable and is what the CLI prints before the message.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define WQT_DEFINE_ERROR(Name, Label)                                          \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& what) : Error(Label, what) {}         \
    }

WQT_DEFINE_ERROR(DimensionError, "dimension error");
WQT_DEFINE_ERROR(DomainError, "domain error");
WQT_DEFINE_ERROR(ContractError, "contract error");
WQT_DEFINE_ERROR(ConfigError, "configuration error");
WQT_DEFINE_ERROR(IngestionError, "ingestion error");
WQT_DEFINE_ERROR(NormalizationError, "normalization error");
WQT_DEFINE_ERROR(SplitError, "split error");
WQT_DEFINE_ERROR(CorruptionError, "corruption error");
WQT_DEFINE_ERROR(MetricUndefinedError, "metric undefined");
WQT_DEFINE_ERROR(InsufficientDataError, "insufficient data");
WQT_DEFINE_ERROR(DegenerateTestError, "degenerate test");
WQT_DEFINE_ERROR(SweepError, "sweep error");
WQT_DEFINE_ERROR(AttributionError, "attribution error");
WQT_DEFINE_ERROR(IoError, "I/O error");

#undef WQT_DEFINE_ERROR

/// Raised by the harness when a pipeline stage fails; carries the stage and
/// job identity so partial reports can be failure-marked.
class StageError : public Error {
public:
    StageError(std::string stage, std::string job, const std::string& what)
        : Error("stage failure", stage + " [" + job + "]: " + what),
          stage_(std::move(stage)), job_(std::move(job)) {}
    const std::string& stage() const noexcept { return stage_; }
    const std::string& job() const noexcept { return job_; }

private:
    std::string stage_;
    std::string job_;
};

} // namespace wqt
