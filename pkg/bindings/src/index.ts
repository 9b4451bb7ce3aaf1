export { Tensor, tensor, tensorFrom, encodeTensor, decodeTensor, elementCount } from "./tensor.js";
export { CliRunner, NativeError, NativeExit, RunnerOptions, withWorkdir } from "./runner.js";
export {
  BatchNormSpec,
  Bevkit,
  BranchBlock,
  ConvSpec,
  Detection,
  EquivalenceReport,
  GraphDesc,
  LutInfo,
  writeGraph,
} from "./kernels.js";
