#pragma once

#include "ntg/error.hpp"
#include "ntg/parallel.hpp"
#include "ntg/grid.hpp"
#include "ntg/formats.hpp"
#include "ntg/autograd.hpp"
#include "ntg/network.hpp"
#include "ntg/featnet.hpp"
#include "ntg/matchswap.hpp"
#include "ntg/generator.hpp"
#include "ntg/losses.hpp"
#include "ntg/metrics.hpp"
#include "ntg/toydata.hpp"
#include "ntg/trainer.hpp"
#include "ntg/gradcheck.hpp"
#include "ntg/pipeline.hpp"
