import { defineConfig } from "vitest/config";

// The e2e file boots the real decision service in its own beforeAll, so
// plain unit runs stay free of any Python dependency.
export default defineConfig({
  test: {
    environment: "node",
    testTimeout: 60_000,
    hookTimeout: 180_000,
  },
});
