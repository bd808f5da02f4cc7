#pragma once

#include "cagi/errors.hpp"
#include "cagi/numerics.hpp"
#include "cagi/channel.hpp"
#include "cagi/generator.hpp"
#include "cagi/objective.hpp"
#include "cagi/inversion.hpp"
#include "cagi/cdc.hpp"
#include "cagi/cdc_pipeline.hpp"
#include "cagi/harness.hpp"
