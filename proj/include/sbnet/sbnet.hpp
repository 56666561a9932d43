#pragma once

// Umbrella header.

#include "sbnet/checkpoint.hpp"
#include "sbnet/config.hpp"
#include "sbnet/data.hpp"
#include "sbnet/diagnostics.hpp"
#include "sbnet/encoders.hpp"
#include "sbnet/fusion.hpp"
#include "sbnet/gradcheck.hpp"
#include "sbnet/heads.hpp"
#include "sbnet/image.hpp"
#include "sbnet/metrics.hpp"
#include "sbnet/model.hpp"
#include "sbnet/nn.hpp"
#include "sbnet/ops.hpp"
#include "sbnet/optim.hpp"
#include "sbnet/pipeline.hpp"
#include "sbnet/scoring.hpp"
#include "sbnet/tensor.hpp"
#include "sbnet/text.hpp"
