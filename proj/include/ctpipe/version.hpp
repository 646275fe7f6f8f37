#pragma once

#define CTPIPE_VERSION "0.1.0"
