export * from "./protocol.js";
export * from "./gating.js";
export * from "./socket.js";
export * from "./session.js";
export * from "./render.js";
export * from "./interpolate.js";
export * from "./keys.js";
