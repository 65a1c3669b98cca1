export { BoundArray, DType, TensorFormatError, decodeTensor, encodeTensor, float32Array, float64Array, numel } from "./tensor.js";
export { CamliError, readTensorFile, runCli, runOp, withScratchDir, writeTensorFile } from "./runner.js";
export * as ops from "./ops.js";
export { FlowPrediction, Model, ModelManifest, loadModel } from "./model.js";
